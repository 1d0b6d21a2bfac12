use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{AgentId, AgentSpec, Frame, GridMeta, SensorConfig};
use crate::ndgrad::Tensor;
use crate::percept::geometry::ObjectBox;
use crate::rng::{derive, normal, seeded};

/// One sensor sweep as a fixed-size frame: `rays × beams` returns in world
/// coordinates, with `NaN` marking rays that hit nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scan {
    pub origin_x: f64,
    pub origin_y: f64,
    pub start_angle: f64,
    pub angle_step: f64,
    pub rays: usize,
    pub beams: usize,
    /// Ray-major: entry `ray * beams + beam`.
    pub points: Vec<[f32; 2]>,
}

impl Scan {
    /// Occupancy grid of the returns.
    pub fn rasterize(&self, grid: &GridMeta) -> Tensor {
        let mut occ = Tensor::zeros(&[1, grid.rows, grid.cols]);
        for p in &self.points {
            if p[0].is_nan() {
                continue;
            }
            if let Some((r, c)) = grid.cell_of(p[0] as f64, p[1] as f64) {
                occ.set3(0, r, c, 1.0);
            }
        }
        occ
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_id: AgentId,
    /// `[1, H, W]` occupancy in `[0, 1]`.
    pub grid: Tensor,
    pub meta: GridMeta,
    pub scan: Scan,
}

fn ray_count(agent: &AgentSpec, sensor: &SensorConfig) -> (f64, f64, usize) {
    let step = sensor.azimuth_step_deg.to_radians();
    if agent.fov >= 2.0 * PI - 1e-12 {
        let n = (2.0 * PI / step).round() as usize;
        (agent.pose.yaw - PI, 2.0 * PI / n as f64, n)
    } else {
        let n = (agent.fov / step).ceil() as usize;
        (agent.pose.yaw - agent.fov / 2.0, agent.fov / n as f64, n)
    }
}

/// Nearest hit of the ray `origin + t·dir` (t ∈ (0, max_t]) with any box edge.
fn cast(ox: f64, oy: f64, dx: f64, dy: f64, max_t: f64, objects: &[ObjectBox]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (i, b) in objects.iter().enumerate() {
        let reach = 0.5 * b.length.hypot(b.width);
        // skip boxes the ray cannot reach
        let (cx, cy) = (b.center_x - ox, b.center_y - oy);
        let along = cx * dx + cy * dy;
        if along < -reach || (cx * dy - cy * dx).abs() > reach {
            continue;
        }
        let c = b.corners();
        for e in 0..4 {
            let (a, q) = (c[e], c[(e + 1) % 4]);
            let (ex, ey) = (q[0] - a[0], q[1] - a[1]);
            let denom = dx * ey - dy * ex;
            if denom.abs() < 1e-15 {
                continue;
            }
            let (ax, ay) = (a[0] - ox, a[1] - oy);
            let t = (ax * ey - ay * ex) / denom;
            let s = (ax * dy - ay * dx) / denom;
            if t > 1e-9 && t <= max_t && (0.0..=1.0).contains(&s) && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, i));
            }
        }
    }
    best
}

/// Number of rays whose first hit is each object.
pub fn ray_hit_counts(frame: &Frame, agent: &AgentSpec, sensor: &SensorConfig) -> Vec<usize> {
    let (start, step, n) = ray_count(agent, sensor);
    let mut counts = vec![0; frame.objects.len()];
    for r in 0..n {
        let th = start + (r as f64 + 0.5) * step;
        if let Some((_, i)) = cast(agent.pose.x, agent.pose.y, th.cos(), th.sin(), agent.sensor_range, &frame.objects) {
            counts[i] += 1;
        }
    }
    counts
}

/// Objects first-hit by at least `min_rays` rays of some agent in `agents`.
pub fn visible_objects<'a>(
    frame: &Frame,
    agents: impl IntoIterator<Item = &'a AgentSpec>,
    sensor: &SensorConfig,
    min_rays: usize,
) -> Vec<bool> {
    let mut vis = vec![false; frame.objects.len()];
    for a in agents {
        for (v, c) in vis.iter_mut().zip(ray_hit_counts(frame, a, sensor)) {
            *v |= c >= min_rays.max(1);
        }
    }
    vis
}

/// Renders `agent`'s sweep of `frame` and rasterizes it onto `grid`.
pub fn render_observation(
    frame: &Frame,
    agent: &AgentSpec,
    sensor: &SensorConfig,
    grid: &GridMeta,
    noise_seed: u64,
) -> Observation {
    let (start, step, n) = ray_count(agent, sensor);
    let mut rng = seeded(derive(derive(noise_seed, frame.index as u64), agent.agent_id as u64));
    let beams = sensor.beams.max(1);
    let mut points = Vec::with_capacity(n * beams);
    for r in 0..n {
        let th = start + (r as f64 + 0.5) * step;
        let (dx, dy) = (th.cos(), th.sin());
        match cast(agent.pose.x, agent.pose.y, dx, dy, agent.sensor_range, &frame.objects) {
            Some((t, _)) => {
                let (hx, hy) = (agent.pose.x + t * dx, agent.pose.y + t * dy);
                for _ in 0..beams {
                    let (nx, ny) = if sensor.noise_sigma > 0.0 {
                        (sensor.noise_sigma * normal(&mut rng), sensor.noise_sigma * normal(&mut rng))
                    } else {
                        (0.0, 0.0)
                    };
                    points.push([(hx + nx) as f32, (hy + ny) as f32]);
                }
            }
            None => points.extend(std::iter::repeat_n([f32::NAN; 2], beams)),
        }
    }
    let scan = Scan {
        origin_x: agent.pose.x,
        origin_y: agent.pose.y,
        start_angle: start,
        angle_step: step,
        rays: n,
        beams,
        points,
    };
    Observation {
        agent_id: agent.agent_id,
        grid: rasterize_exact(&scan, frame, agent, grid, sensor),
        meta: *grid,
        scan,
    }
}

/// Rasterizes from full-precision hits when there is no noise so cells on a
/// box edge are not lost to `f32` rounding; otherwise from the scan points.
fn rasterize_exact(scan: &Scan, frame: &Frame, agent: &AgentSpec, grid: &GridMeta, sensor: &SensorConfig) -> Tensor {
    if sensor.noise_sigma > 0.0 {
        return scan.rasterize(grid);
    }
    let mut occ = Tensor::zeros(&[1, grid.rows, grid.cols]);
    for r in 0..scan.rays {
        let th = scan.start_angle + (r as f64 + 0.5) * scan.angle_step;
        let (dx, dy) = (th.cos(), th.sin());
        if let Some((t, _)) = cast(agent.pose.x, agent.pose.y, dx, dy, agent.sensor_range, &frame.objects) {
            if let Some((row, col)) = grid.cell_of(agent.pose.x + t * dx, agent.pose.y + t * dy) {
                occ.set3(0, row, col, 1.0);
            }
        }
    }
    occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Pose;

    fn agent(range: f64, fov_deg: f64) -> AgentSpec {
        AgentSpec {
            agent_id: 0,
            is_ego: true,
            pose: Pose { x: -10.0, y: 0.3, yaw: 0.0 },
            encoder_family: "lp".into(),
            sensor_range: range,
            fov: fov_deg.to_radians(),
        }
    }

    fn frame(objects: Vec<ObjectBox>) -> Frame {
        Frame { index: 0, objects, poses: vec![] }
    }

    fn noiseless() -> SensorConfig {
        SensorConfig { azimuth_step_deg: 0.1, beams: 2, noise_sigma: 0.0 }
    }

    /// Cells whose closed square meets the boundary of `b`, by dense edge sampling.
    fn boundary_cells(b: &ObjectBox, grid: &GridMeta) -> std::collections::BTreeSet<(usize, usize)> {
        let mut out = std::collections::BTreeSet::new();
        let c = b.corners();
        for e in 0..4 {
            let (p, q) = (c[e], c[(e + 1) % 4]);
            for s in 0..=4000 {
                let u = s as f64 / 4000.0;
                let (x, y) = (p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1]));
                // a point on a cell edge touches both neighbours
                for ox in [-1e-9, 0.0, 1e-9] {
                    for oy in [-1e-9, 0.0, 1e-9] {
                        if let Some(cell) = grid.cell_of(x + ox, y + oy) {
                            out.insert(cell);
                        }
                    }
                }
            }
        }
        out
    }

    fn occupied(t: &Tensor) -> Vec<(usize, usize)> {
        let (_, h, w) = t.dims3().unwrap();
        (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| t.at3(0, r, c) > 0.0).collect()
    }

    #[test]
    fn no_objects_gives_zero_grid() {
        let grid = GridMeta::centered(32, 1.0);
        let obs = render_observation(&frame(vec![]), &agent(15.0, 360.0), &SensorConfig::default(), &grid, 1);
        assert!(obs.grid.data().iter().all(|&v| v == 0.0));
        assert!(obs.scan.points.iter().all(|p| p[0].is_nan()));
    }

    #[test]
    fn fully_occluded_box_contributes_nothing() {
        let grid = GridMeta::centered(32, 1.0);
        // a wide wall in front, a small box directly behind it
        let wall = ObjectBox::new(-4.0, 0.3, 1.0, 12.0, 0.0);
        let hidden = ObjectBox::new(0.0, 0.3, 2.0, 1.5, 0.0);
        let f = frame(vec![wall, hidden]);
        let a = agent(20.0, 360.0);
        let counts = ray_hit_counts(&f, &a, &noiseless());
        assert!(counts[0] > 0);
        assert_eq!(counts[1], 0);
        // ray-cast oracle: no cell of the hidden box's far-side footprint is lit
        let obs = render_observation(&f, &a, &noiseless(), &grid, 0);
        let alone = render_observation(&frame(vec![wall]), &a, &noiseless(), &grid, 0);
        assert_eq!(obs.grid, alone.grid);
    }

    #[test]
    fn noiseless_box_lights_exactly_its_boundary() {
        let grid = GridMeta::centered(32, 1.0);
        let b = ObjectBox::new(-2.6, 1.1, 4.2, 1.9, 0.0);
        let obs = render_observation(&frame(vec![b]), &agent(20.0, 360.0), &noiseless(), &grid, 0);
        let lit = occupied(&obs.grid);
        let boundary = boundary_cells(&b, &grid);
        assert!(!lit.is_empty());
        assert!(lit.iter().all(|c| boundary.contains(c)), "lit {lit:?} boundary {boundary:?}");
        // the near face (x = -4.7) is fully visible: every cell along it is lit
        let near_x = b.center_x - b.length / 2.0 + 1e-6;
        for s in 1..19 {
            let y = b.center_y - b.width / 2.0 + s as f64 * b.width / 19.0;
            let cell = grid.cell_of(near_x, y).unwrap();
            assert!(lit.contains(&cell), "missing {cell:?}");
        }
    }

    #[test]
    fn out_of_range_contributes_nothing() {
        let grid = GridMeta::centered(32, 1.0);
        let b = ObjectBox::new(10.0, 0.0, 4.0, 2.0, 0.0);
        let obs = render_observation(&frame(vec![b]), &agent(8.0, 360.0), &noiseless(), &grid, 0);
        assert!(obs.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn larger_range_never_removes_cells() {
        let grid = GridMeta::centered(32, 1.0);
        let objs = vec![
            ObjectBox::new(-4.0, 3.0, 4.0, 2.0, 0.3),
            ObjectBox::new(2.0, -4.0, 4.0, 2.0, 1.2),
            ObjectBox::new(8.0, 6.0, 4.0, 2.0, -0.4),
        ];
        let f = frame(objs);
        let mut prev: Option<Tensor> = None;
        for range in [4.0, 8.0, 12.0, 16.0, 24.0] {
            let obs = render_observation(&f, &agent(range, 360.0), &noiseless(), &grid, 0);
            if let Some(p) = &prev {
                for (a, b) in p.data().iter().zip(obs.grid.data()) {
                    assert!(b >= a);
                }
            }
            prev = Some(obs.grid);
        }
    }

    #[test]
    fn rendering_is_deterministic_and_noise_seeded() {
        let grid = GridMeta::centered(32, 1.0);
        let f = frame(vec![ObjectBox::new(-3.0, 2.0, 4.0, 2.0, 0.5)]);
        let sensor = SensorConfig { noise_sigma: 0.3, ..SensorConfig::default() };
        let a = render_observation(&f, &agent(20.0, 360.0), &sensor, &grid, 5);
        let b = render_observation(&f, &agent(20.0, 360.0), &sensor, &grid, 5);
        let c = render_observation(&f, &agent(20.0, 360.0), &sensor, &grid, 6);
        let bits = |o: &Observation| -> Vec<[u32; 2]> { o.scan.points.iter().map(|p| [p[0].to_bits(), p[1].to_bits()]).collect() };
        assert_eq!(a.grid, b.grid);
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
        assert!(a.grid.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scan_frame_size_is_fixed() {
        let sensor = SensorConfig::default();
        let a = agent(15.0, 360.0);
        let empty = render_observation(&frame(vec![]), &a, &sensor, &GridMeta::centered(32, 1.0), 0);
        let full = render_observation(
            &frame(vec![ObjectBox::new(-6.0, 0.0, 4.0, 2.0, 0.0)]),
            &a,
            &sensor,
            &GridMeta::centered(32, 1.0),
            0,
        );
        assert_eq!(empty.scan.points.len(), full.scan.points.len());
        assert_eq!(empty.scan.points.len(), 720 * sensor.beams);
    }
}
