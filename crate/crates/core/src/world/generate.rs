use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use super::{AgentSpec, Frame, Pose, Scenario, Split, WorldConfig, YawPolicy};
use crate::error::{Error, Result};
use crate::percept::geometry::{intersection_area, rotated_iou, wrap_angle, ObjectBox};
use crate::rng::{derive, normal, seeded, SimRng};

/// Object trajectory: center at relative time `t` is `start + t·velocity`,
/// where `t = 0` is the first query frame.
#[derive(Clone, Copy, Debug)]
struct Track {
    start: ObjectBox,
    vx: f64,
    vy: f64,
}

impl Track {
    fn at(&self, t: f64) -> ObjectBox {
        ObjectBox {
            center_x: self.start.center_x + t * self.vx,
            center_y: self.start.center_y + t * self.vy,
            ..self.start
        }
    }
}

fn half_diag(b: &ObjectBox) -> f64 {
    0.5 * b.length.hypot(b.width)
}

/// True when no part of `b` can be in `agent`'s sensing region.
fn outside_region(agent: &AgentSpec, b: &ObjectBox) -> bool {
    let (dx, dy) = (b.center_x - agent.pose.x, b.center_y - agent.pose.y);
    let margin = half_diag(b) + 0.25;
    if dx.hypot(dy) > agent.sensor_range + margin {
        return true;
    }
    if agent.fov >= 2.0 * PI - 1e-12 {
        return false;
    }
    // angular test on the corners; the box must also be clear of the apex
    let clear = |x: f64, y: f64| {
        let bearing = wrap_angle((y - agent.pose.y).atan2(x - agent.pose.x) - agent.pose.yaw);
        bearing.abs() > agent.fov / 2.0 + 0.05
    };
    dx.hypot(dy) > margin + 1.0
        && b.corners().iter().all(|c| clear(c[0], c[1]))
        && clear(b.center_x, b.center_y)
        && {
            // all corners on one side of the backward axis, so the box cannot wrap the sector
            let side = |x: f64, y: f64| wrap_angle((y - agent.pose.y).atan2(x - agent.pose.x) - agent.pose.yaw).signum();
            let s0 = side(b.corners()[0][0], b.corners()[0][1]);
            b.corners().iter().all(|c| side(c[0], c[1]) == s0)
        }
}

/// True when all of `b` is inside `agent`'s sensing region.
fn inside_region(agent: &AgentSpec, b: &ObjectBox) -> bool {
    let (dx, dy) = (b.center_x - agent.pose.x, b.center_y - agent.pose.y);
    dx.hypot(dy) + half_diag(b) + 0.25 <= agent.sensor_range
        && b.corners().iter().all(|c| agent.senses(c[0], c[1]))
}

fn sample_yaw(policy: &YawPolicy, rng: &mut SimRng) -> f64 {
    match policy {
        YawPolicy::RoadAligned { jitter } => {
            let base = rng.random_range(0..4) as f64 * FRAC_PI_2;
            wrap_angle(base + jitter * normal(rng))
        }
        YawPolicy::Uniform => rng.random_range(-PI..PI),
    }
}

fn place_agents(cfg: &WorldConfig, rng: &mut SimRng) -> Result<Vec<AgentSpec>> {
    let (x0, x1, y0, y1) = cfg.grid().extent();
    let width = x1 - x0;
    let n = rng.random_range(cfg.agent_count[0]..=cfg.agent_count[1]);
    let mut agents = vec![AgentSpec {
        agent_id: 0,
        is_ego: true,
        pose: Pose {
            x: x0 + 0.08 * width + rng.random_range(0.0..0.06 * width),
            y: rng.random_range(-0.12 * width..0.12 * width),
            yaw: rng.random_range(-0.3..0.3),
        },
        encoder_family: cfg.ego_family.clone(),
        sensor_range: cfg.ego_range,
        fov: cfg.ego_fov_deg.to_radians(),
    }];
    for i in 1..n {
        let mut placed = None;
        for _ in 0..cfg.max_attempts {
            let pose = Pose {
                x: rng.random_range(x0 + 0.45 * width..x1 - 0.1 * width),
                y: rng.random_range(y0 + 0.1 * width..y1 - 0.1 * width),
                yaw: rng.random_range(-PI..PI),
            };
            let ok = agents.iter().all(|a| {
                let d = (a.pose.x - pose.x).hypot(a.pose.y - pose.y);
                d >= if a.is_ego { 0.3 * width } else { 0.15 * width }
            });
            if ok {
                placed = Some(pose);
                break;
            }
        }
        let pose = placed.ok_or(Error::Placement {
            constraint: "collaborator spacing",
            attempts: cfg.max_attempts,
        })?;
        agents.push(AgentSpec {
            agent_id: i as u32,
            is_ego: false,
            pose,
            encoder_family: cfg.collaborator_families[(i - 1) % cfg.collaborator_families.len()].clone(),
            sensor_range: cfg.collaborator_range,
            fov: cfg.collaborator_fov_deg.to_radians(),
        });
    }
    Ok(agents)
}

/// Generates a scenario with `k` support frames followed by
/// `cfg.query_frames` query frames. Deterministic in `(cfg, k, seed)`, and the
/// query frames are identical for every `k ≤ cfg.max_support`.
pub fn generate_scenario(cfg: &WorldConfig, k: usize, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    if k > cfg.max_support {
        return Err(Error::Config(format!("k = {k} exceeds max_support = {}", cfg.max_support)));
    }
    let mut rng = seeded(derive(seed, 0x5CE4_A810));
    let grid = cfg.grid();
    let (x0, x1, y0, y1) = grid.extent();
    let agents = place_agents(cfg, &mut rng)?;
    let ego = agents[0].clone();
    let times: Vec<f64> = (-(cfg.max_support as i64)..cfg.query_frames as i64).map(|t| t as f64).collect();

    let n_objects = rng.random_range(cfg.object_count[0]..=cfg.object_count[1]);
    let n_hidden = (cfg.narrow_view_fraction * n_objects as f64).ceil() as usize;
    let mut tracks: Vec<Track> = Vec::with_capacity(n_objects);
    for obj in 0..n_objects {
        let hidden = obj < n_hidden;
        let mut accepted = None;
        let mut failed = "object placement";
        for _ in 0..cfg.max_attempts {
            let length = rng.random_range(cfg.object_length[0]..=cfg.object_length[1]);
            let width = rng.random_range(cfg.object_width[0]..=cfg.object_width[1]);
            let yaw = sample_yaw(&cfg.yaw_policy, &mut rng);
            let (cx, cy) = if hidden && agents.len() > 1 {
                // aim near a random collaborator so coverage is likely
                let a = &agents[rng.random_range(1..agents.len())];
                let r = rng.random_range(0.0..a.sensor_range) * 0.8;
                let th = rng.random_range(-PI..PI);
                (a.pose.x + r * th.cos(), a.pose.y + r * th.sin())
            } else {
                (rng.random_range(x0..x1), rng.random_range(y0..y1))
            };
            let speed = rng.random_range(0.0..=cfg.max_speed);
            let dir = if rng.random_bool(0.5) { yaw } else { yaw + PI };
            let track = Track {
                start: ObjectBox::new(cx, cy, length, width, yaw),
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
            };
            match check_track(cfg, &agents, &ego, &tracks, &track, &times, hidden, &grid) {
                Ok(()) => {
                    accepted = Some(track);
                    break;
                }
                Err(c) => failed = c,
            }
        }
        tracks.push(accepted.ok_or(Error::Placement {
            constraint: failed,
            attempts: cfg.max_attempts,
        })?);
    }

    let frames = (0..k + cfg.query_frames)
        .map(|index| {
            let t = index as f64 - k as f64;
            Frame {
                index,
                objects: tracks.iter().map(|tr| tr.at(t)).collect(),
                poses: agents.iter().map(|a| (a.agent_id, a.pose)).collect(),
            }
        })
        .collect();
    Ok(Scenario {
        scenario_id: format!("scn-{seed:08x}"),
        seed,
        grid,
        sensor: cfg.sensor.clone(),
        agents,
        frames,
        split: Split {
            support: (0..k).collect(),
            query: (k..k + cfg.query_frames).collect(),
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn check_track(
    cfg: &WorldConfig,
    agents: &[AgentSpec],
    ego: &AgentSpec,
    placed: &[Track],
    track: &Track,
    times: &[f64],
    hidden: bool,
    grid: &super::GridMeta,
) -> std::result::Result<(), &'static str> {
    for &t in times {
        let b = track.at(t);
        if !b.corners().iter().all(|c| grid.contains(c[0], c[1])) {
            return Err("objects stay inside world bounds");
        }
        let clearance = half_diag(&b) + 1.0;
        if agents.iter().any(|a| (a.pose.x - b.center_x).hypot(a.pose.y - b.center_y) < clearance) {
            return Err("objects keep clear of agents");
        }
        for other in placed {
            let o = other.at(t);
            let overlap = if cfg.max_overlap_iou <= 0.0 {
                intersection_area(&b, &o) > 0.0 || (b.center_x - o.center_x).hypot(b.center_y - o.center_y) < 1.0
            } else {
                rotated_iou(&b, &o).unwrap_or(1.0) > cfg.max_overlap_iou
            };
            if overlap {
                return Err("objects do not overlap");
            }
        }
        if hidden {
            if !outside_region(ego, &b) {
                return Err("narrow view: object outside ego field of view");
            }
            if !agents.iter().filter(|a| !a.is_ego).any(|a| inside_region(a, &b)) {
                return Err("narrow view: object inside a collaborator field of view");
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense boundary sampling against the ego's range/FoV test.
    fn ego_sees_any_of(ego: &AgentSpec, b: &ObjectBox) -> bool {
        let c = b.corners();
        (0..4).any(|e| {
            let (p, q) = (c[e], c[(e + 1) % 4]);
            (0..=200).any(|s| {
                let u = s as f64 / 200.0;
                ego.senses(p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1]))
            })
        })
    }

    #[test]
    fn empty_object_range_gives_empty_frames() {
        let cfg = WorldConfig {
            object_count: [0, 0],
            ..WorldConfig::default()
        };
        let s = generate_scenario(&cfg, 3, 1).unwrap();
        assert_eq!(s.frames.len(), 3 + cfg.query_frames);
        assert!(s.frames.iter().all(|f| f.objects.is_empty()));
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = WorldConfig::default();
        let a = generate_scenario(&cfg, 5, 42).unwrap().to_json().unwrap();
        let b = generate_scenario(&cfg, 5, 42).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&cfg, 5, 43).unwrap().to_json().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn narrow_view_fraction_holds_every_frame() {
        for fov in [360.0, 120.0] {
            let cfg = WorldConfig {
                narrow_view_fraction: 0.5,
                ego_fov_deg: fov,
                ..WorldConfig::default()
            };
            for seed in 0..10 {
                let s = generate_scenario(&cfg, 5, seed).unwrap();
                let ego = s.ego();
                for f in &s.frames {
                    let outside = f.objects.iter().filter(|b| !ego_sees_any_of(ego, b)).count();
                    assert!(2 * outside >= f.objects.len(), "seed {seed} frame {}: {outside}/{}", f.index, f.objects.len());
                }
            }
        }
    }

    #[test]
    fn split_partitions_frames_in_time_order() {
        let cfg = WorldConfig::default();
        for k in [0, 1, 5, 10] {
            let s = generate_scenario(&cfg, k, 9).unwrap();
            assert_eq!(s.split.support.len(), k);
            assert_eq!(s.split.query.len(), cfg.query_frames);
            let mut all: Vec<usize> = s.split.support.iter().chain(&s.split.query).copied().collect();
            assert!(s.split.support.iter().all(|&i| s.split.query.iter().all(|&j| i < j)));
            all.sort();
            assert_eq!(all, (0..s.frames.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn query_frames_do_not_depend_on_k() {
        let cfg = WorldConfig::default();
        let a = generate_scenario(&cfg, 1, 5).unwrap();
        let b = generate_scenario(&cfg, 10, 5).unwrap();
        for (qa, qb) in a.split.query.iter().zip(&b.split.query) {
            assert_eq!(a.frames[*qa].objects, b.frames[*qb].objects);
        }
        assert_eq!(a.agents, b.agents);
    }

    #[test]
    fn objects_do_not_overlap_and_stay_in_bounds() {
        let cfg = WorldConfig::default();
        let s = generate_scenario(&cfg, 10, 17).unwrap();
        for f in &s.frames {
            for (i, a) in f.objects.iter().enumerate() {
                assert!(a.corners().iter().all(|c| s.grid.contains(c[0], c[1])));
                for b in &f.objects[i + 1..] {
                    assert!(rotated_iou(a, b).unwrap() <= 0.3);
                }
            }
        }
    }

    #[test]
    fn infeasible_placement_names_constraint() {
        let cfg = WorldConfig {
            object_count: [60, 60],
            max_attempts: 50,
            ..WorldConfig::default()
        };
        let err = generate_scenario(&cfg, 1, 3).unwrap_err();
        assert!(matches!(err, Error::Placement { .. }), "{err}");
    }

    #[test]
    fn k_beyond_horizon_is_config_error() {
        let cfg = WorldConfig::default();
        assert!(matches!(generate_scenario(&cfg, 11, 0), Err(Error::Config(_))));
    }
}
