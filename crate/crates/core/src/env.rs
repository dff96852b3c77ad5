//! A deterministic bird's-eye 2D world: a point agent, circular hazards and
//! a goal disk, observed only through rendered RGB images.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 1000;
pub const GOAL_BONUS: f64 = 1.0;

pub const BACKGROUND: [u8; 3] = [51, 51, 51];
pub const HAZARD_COLOR: [u8; 3] = [230, 26, 26];
pub const GOAL_COLOR: [u8; 3] = [26, 230, 26];
pub const AGENT_COLOR: [u8; 3] = [26, 26, 230];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Disk {
    pub fn new(x: f64, y: f64, radius: f64) -> Self {
        Disk { center: [x, y], radius }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    /// The arena is the square `[-e, e]^2`.
    pub arena_half_extent: f64,
    pub hazards: Vec<Disk>,
    pub goal: Disk,
    pub agent_radius: f64,
    /// Smallest radius, in pixels, at which the agent is drawn. Only the
    /// picture changes; contacts always use `agent_radius`.
    pub agent_min_draw_pixels: f64,
    /// World units moved per step at full action.
    pub max_speed: f64,
    pub episode_length: usize,
    /// Square RGB image side length in pixels.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            arena_half_extent: 1.0,
            hazards: vec![
                Disk::new(-0.4, 0.45, 0.25),
                Disk::new(0.45, -0.4, 0.25),
                Disk::new(0.05, 0.05, 0.25),
            ],
            goal: Disk::new(0.6, 0.6, 0.15),
            agent_radius: 0.05,
            agent_min_draw_pixels: 2.0,
            max_speed: 0.05,
            episode_length: 200,
            image_size: 32,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.arena_half_extent > 0.0) {
            return bad("arena_half_extent must be positive".into());
        }
        if !(self.agent_radius > 0.0) || !(self.goal.radius > 0.0) || self.hazards.iter().any(|h| !(h.radius > 0.0)) {
            return bad("all radii must be positive".into());
        }
        if !(self.agent_min_draw_pixels >= 0.0) {
            return bad("agent_min_draw_pixels must be non-negative".into());
        }
        if !(self.max_speed >= 0.0) {
            return bad("max_speed must be non-negative".into());
        }
        if self.episode_length == 0 {
            return bad("episode_length must be positive".into());
        }
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        for (i, h) in self.hazards.iter().enumerate() {
            if distance(h.center, self.goal.center) < h.radius + self.goal.radius {
                return bad(format!("goal intersects hazard {i}"));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }

    fn pixel_size(&self) -> f64 {
        2.0 * self.arena_half_extent / self.image_size as f64
    }

    /// World coordinates of the center of pixel `(row, col)`; rows grow
    /// downward, world `y` grows upward.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let px = self.pixel_size();
        let e = self.arena_half_extent;
        [-e + (col as f64 + 0.5) * px, e - (row as f64 + 0.5) * px]
    }

    fn clamp_to_arena(&self, p: [f64; 2]) -> [f64; 2] {
        let e = self.arena_half_extent;
        [p[0].clamp(-e, e), p[1].clamp(-e, e)]
    }
}

/// Underlying world state, never shown to the agent directly.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub step_index: usize,
    rng: ChaCha8Rng,
}

impl PartialEq for EnvState {
    fn eq(&self, other: &Self) -> bool {
        self.agent_pos == other.agent_pos
            && self.goal_pos == other.goal_pos
            && self.step_index == other.step_index
            && self.rng == other.rng
    }
}

impl EnvState {
    /// A state at an arbitrary position, for probing the detector and the
    /// renderer.
    pub fn at(agent_pos: [f64; 2], goal_pos: [f64; 2]) -> Self {
        EnvState {
            agent_pos,
            goal_pos,
            step_index: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// `3 x H x W` image stored as bytes; channel values are `byte / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Observation {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != 3 * height * width {
            return Err(Error::Invalid(format!("{} bytes for a 3x{height}x{width} image", pixels.len())));
        }
        Ok(Observation { height, width, pixels })
    }

    pub fn shape(&self) -> [usize; 3] {
        [3, self.height, self.width]
    }

    /// Channel value in `[0, 1]`.
    pub fn value(&self, channel: usize, row: usize, col: usize) -> f64 {
        f64::from(self.pixels[(channel * self.height + row) * self.width + col]) / 255.0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.pixels.iter().map(|&b| f64::from(b) / 255.0)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.values().collect()).expect("pixel count checked")
    }

    /// Quantize a `[3,H,W]` tensor with values in `[0,1]`.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let pixels = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Observation::new(height, width, pixels)
    }

    /// Binary PPM (P6, 8-bit).
    pub fn write_ppm(&self, out: &mut impl Write) -> io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let plane = self.height * self.width;
        let mut rgb = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                rgb.push(self.pixels[c * plane + i]);
            }
        }
        out.write_all(&rgb)
    }

    /// Two images of equal height placed side by side.
    pub fn side_by_side(&self, other: &Observation) -> Result<Observation> {
        if self.height != other.height {
            return Err(Error::Invalid("images differ in height".into()));
        }
        let width = self.width + other.width;
        let mut pixels = Vec::with_capacity(3 * self.height * width);
        for c in 0..3 {
            for r in 0..self.height {
                for o in [self, other] {
                    pixels.extend_from_slice(&o.pixels[(c * o.height + r) * o.width..][..o.width]);
                }
            }
        }
        Observation::new(self.height, width, pixels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub kappa: u8,
    pub done: bool,
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: [f64; 2],
    pub reward: f64,
    pub kappa: u8,
}

pub fn write_trace(steps: &[TraceStep], out: &mut impl Write) -> Result<()> {
    for s in steps {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct HazardWorld {
    config: WorldConfig,
}

impl HazardWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(HazardWorld { config })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub const ACTION_DIM: usize = 2;

    pub fn reset(&self, seed: u64) -> Result<(EnvState, Observation)> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.arena_half_extent;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = [rng.random_range(-e..=e), rng.random_range(-e..=e)];
            let clear_of_hazards = cfg.hazards.iter().all(|h| distance(p, h.center) >= h.radius + cfg.agent_radius);
            let clear_of_goal = distance(p, cfg.goal.center) >= cfg.goal.radius + cfg.agent_radius;
            if clear_of_hazards && clear_of_goal {
                let state = EnvState {
                    agent_pos: p,
                    goal_pos: cfg.goal.center,
                    step_index: 0,
                    rng,
                };
                let obs = self.render(&state);
                return Ok((state, obs));
            }
        }
        Err(Error::Config(format!(
            "no safe start position found in {PLACEMENT_ATTEMPTS} attempts"
        )))
    }

    /// 1 iff the agent disk overlaps some hazard (touching is safe).
    pub fn safety_detector(&self, state: &EnvState) -> u8 {
        let r = self.config.agent_radius;
        u8::from(
            self.config
                .hazards
                .iter()
                .any(|h| distance(state.agent_pos, h.center) < h.radius + r),
        )
    }

    pub fn step(&self, state: &mut EnvState, action: [f64; 2]) -> StepOutcome {
        let cfg = &self.config;
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let before = distance(state.agent_pos, state.goal_pos);
        state.agent_pos = cfg.clamp_to_arena([
            state.agent_pos[0] + cfg.max_speed * a[0],
            state.agent_pos[1] + cfg.max_speed * a[1],
        ]);
        let after = distance(state.agent_pos, state.goal_pos);
        let mut reward = before - after;
        if after < cfg.goal.radius {
            reward += GOAL_BONUS;
            self.relocate_goal(state);
        }
        state.step_index = (state.step_index + 1).min(cfg.episode_length);
        StepOutcome {
            observation: self.render(state),
            reward,
            kappa: self.safety_detector(state),
            done: state.step_index == cfg.episode_length,
        }
    }

    fn relocate_goal(&self, state: &mut EnvState) {
        let cfg = &self.config;
        let r = cfg.goal.radius;
        let lim = (cfg.arena_half_extent - r).max(0.0);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let g = [state.rng.random_range(-lim..=lim), state.rng.random_range(-lim..=lim)];
            let clear = cfg.hazards.iter().all(|h| distance(g, h.center) >= h.radius + r)
                && distance(g, state.agent_pos) >= r + cfg.agent_radius;
            if clear {
                state.goal_pos = g;
                return;
            }
        }
    }

    /// Rasterize hazards, then the goal, then the agent; later shapes win.
    pub fn render(&self, state: &EnvState) -> Observation {
        let cfg = &self.config;
        let n = cfg.image_size;
        let plane = n * n;
        let mut pixels = vec![0u8; 3 * plane];
        let goal = Disk {
            center: state.goal_pos,
            radius: cfg.goal.radius,
        };
        let agent = Disk {
            center: state.agent_pos,
            radius: cfg.agent_radius.max(cfg.agent_min_draw_pixels * cfg.pixel_size()),
        };
        for row in 0..n {
            for col in 0..n {
                let p = cfg.pixel_center(row, col);
                let inside = |d: &Disk| distance(p, d.center) < d.radius;
                let mut color = BACKGROUND;
                if cfg.hazards.iter().any(inside) {
                    color = HAZARD_COLOR;
                }
                if inside(&goal) {
                    color = GOAL_COLOR;
                }
                if inside(&agent) {
                    color = AGENT_COLOR;
                }
                for (c, v) in color.iter().enumerate() {
                    pixels[c * plane + row * n + col] = *v;
                }
            }
        }
        Observation {
            height: n,
            width: n,
            pixels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> HazardWorld {
        HazardWorld::new(WorldConfig::default()).unwrap()
    }

    fn no_hazards() -> HazardWorld {
        HazardWorld::new(WorldConfig {
            hazards: vec![],
            ..WorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let w = world();
        let (s1, o1) = w.reset(42).unwrap();
        let (s2, o2) = w.reset(42).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        assert_ne!(w.reset(43).unwrap().0.agent_pos, s1.agent_pos);
    }

    #[test]
    fn reset_fails_when_hazards_cover_the_arena() {
        let w = HazardWorld::new(WorldConfig {
            hazards: vec![Disk::new(0.0, 0.0, 2.0)],
            goal: Disk::new(5.0, 5.0, 0.1),
            ..WorldConfig::default()
        })
        .unwrap();
        assert!(matches!(w.reset(0), Err(Error::Config(_))));
    }

    #[test]
    fn reset_without_hazards_starts_safe() {
        let w = no_hazards();
        let (s, _) = w.reset(1).unwrap();
        assert_eq!(w.safety_detector(&s), 0);
    }

    #[test]
    fn start_positions_are_clear_of_hazards_and_goal() {
        let w = world();
        let cfg = w.config();
        for seed in 0..200 {
            let (s, _) = w.reset(seed).unwrap();
            assert_eq!(w.safety_detector(&s), 0);
            assert!(distance(s.agent_pos, cfg.goal.center) >= cfg.goal.radius + cfg.agent_radius);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = WorldConfig::default();
        for cfg in [
            WorldConfig { agent_radius: 0.0, ..base.clone() },
            WorldConfig { episode_length: 0, ..base.clone() },
            WorldConfig { goal: Disk::new(0.05, 0.05, 0.1), ..base.clone() },
        ] {
            assert!(HazardWorld::new(cfg).is_err());
        }
    }

    #[test]
    fn null_action_keeps_position_and_earns_nothing() {
        let w = world();
        let (mut s, _) = w.reset(3).unwrap();
        let before = s.agent_pos;
        let out = w.step(&mut s, [0.0, 0.0]);
        assert_eq!(s.agent_pos, before);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn stepping_onto_the_goal_pays_distance_plus_bonus() {
        let w = no_hazards();
        let cfg = w.config().clone();
        let goal = cfg.goal.center;
        let mut s = EnvState::at([goal[0] - cfg.max_speed, goal[1]], goal);
        let out = w.step(&mut s, [1.0, 0.0]);
        assert!((out.reward - (cfg.max_speed + GOAL_BONUS)).abs() < 1e-12, "{}", out.reward);
        assert_ne!(s.goal_pos, goal, "goal relocates after being reached");
        assert!(!out.done);
    }

    #[test]
    fn actions_are_clamped() {
        let w = no_hazards();
        let mut a = EnvState::at([0.0, 0.0], [0.9, 0.9]);
        let mut b = a.clone();
        w.step(&mut a, [5.0, -3.0]);
        w.step(&mut b, [1.0, -1.0]);
        assert_eq!(a.agent_pos, b.agent_pos);
    }

    #[test]
    fn position_stays_in_the_arena() {
        let w = no_hazards();
        let mut s = EnvState::at([0.99, -0.99], [-0.5, 0.5]);
        for _ in 0..5 {
            w.step(&mut s, [1.0, -1.0]);
        }
        assert_eq!(s.agent_pos, [1.0, -1.0]);
    }

    #[test]
    fn episodes_end_after_the_configured_length() {
        let w = HazardWorld::new(WorldConfig { episode_length: 3, ..WorldConfig::default() }).unwrap();
        let (mut s, _) = w.reset(0).unwrap();
        let done: Vec<bool> = (0..4).map(|_| w.step(&mut s, [0.1, 0.0]).done).collect();
        assert_eq!(done, [false, false, true, true]);
        assert_eq!(s.step_index, 3);
    }

    #[test]
    fn detector_boundary_is_safe() {
        let w = world();
        let cfg = w.config();
        let h = cfg.hazards[0];
        assert_eq!(w.safety_detector(&EnvState::at(h.center, cfg.goal.center)), 1);
        let edge = [h.center[0] + h.radius + cfg.agent_radius, h.center[1]];
        assert_eq!(distance(edge, h.center), h.radius + cfg.agent_radius);
        assert_eq!(w.safety_detector(&EnvState::at(edge, cfg.goal.center)), 0);
        let inside = [edge[0] - 1e-9, edge[1]];
        assert_eq!(w.safety_detector(&EnvState::at(inside, cfg.goal.center)), 1);
        assert_eq!(no_hazards().safety_detector(&EnvState::at(h.center, cfg.goal.center)), 0);
    }

    #[test]
    fn agent_center_pixel_is_blue() {
        let w = world();
        let cfg = w.config();
        for seed in 0..50 {
            let (s, o) = w.reset(seed).unwrap();
            let px = 2.0 * cfg.arena_half_extent / cfg.image_size as f64;
            let col = (((s.agent_pos[0] + 1.0) / px) as usize).min(cfg.image_size - 1);
            let row = (((1.0 - s.agent_pos[1]) / px) as usize).min(cfg.image_size - 1);
            let (r, g, b) = (o.value(0, row, col), o.value(1, row, col), o.value(2, row, col));
            assert!(b > r && b > g, "seed {seed}: ({r},{g},{b})");
        }
    }

    #[test]
    fn small_agents_are_drawn_at_the_minimum_size() {
        let cfg = WorldConfig { hazards: vec![], ..WorldConfig::default() };
        let blue = |cfg: WorldConfig| {
            let o = HazardWorld::new(cfg).unwrap().render(&EnvState::at([0.013, 0.171], [-0.8, -0.8]));
            (0..o.height * o.width).filter(|&i| o.pixels[2 * o.height * o.width + i] == AGENT_COLOR[2]).count()
        };
        // A 2-pixel radius covers about 4 pi pixels; the physical radius alone under one.
        assert!((10..=16).contains(&blue(cfg.clone())), "{}", blue(cfg.clone()));
        assert!(blue(WorldConfig { agent_min_draw_pixels: 0.0, ..cfg.clone() }) <= 4);
        // Contacts ignore the drawn size.
        let w = world();
        let h = w.config().hazards[0];
        let just_outside = [h.center[0] + h.radius + w.config().agent_radius + 1e-9, h.center[1]];
        assert_eq!(w.safety_detector(&EnvState::at(just_outside, w.config().goal.center)), 0);
    }

    #[test]
    fn render_is_bit_identical_and_in_range() {
        let w = world();
        let (s, o) = w.reset(9).unwrap();
        assert_eq!(w.render(&s), o);
        assert_eq!(o.shape(), w.config().image_shape());
        assert!(o.values().all(|v| (0.0..=1.0).contains(&v)));
    }

    fn blue_centroid(o: &Observation) -> (f64, f64) {
        let (mut sr, mut sc, mut n) = (0.0, 0.0, 0.0);
        for r in 0..o.height {
            for c in 0..o.width {
                if o.pixels[(2 * o.height + r) * o.width + c] == AGENT_COLOR[2] {
                    sr += r as f64;
                    sc += c as f64;
                    n += 1.0;
                }
            }
        }
        (sr / n, sc / n)
    }

    #[test]
    fn one_pixel_move_shifts_agent_centroid_by_one_pixel() {
        let w = HazardWorld::new(WorldConfig {
            hazards: vec![],
            agent_radius: 0.2,
            ..WorldConfig::default()
        })
        .unwrap();
        let px = 2.0 / 32.0;
        let goal = [-0.8, -0.8];
        let start = [0.013, 0.171];
        let (r0, c0) = blue_centroid(&w.render(&EnvState::at(start, goal)));
        let (r1, c1) = blue_centroid(&w.render(&EnvState::at([start[0] + px, start[1]], goal)));
        assert!((c1 - c0 - 1.0).abs() < 1e-12, "{c0} -> {c1}");
        assert!((r1 - r0).abs() < 1e-12);
        let (r2, _) = blue_centroid(&w.render(&EnvState::at([start[0], start[1] - px], goal)));
        assert!((r2 - r0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_kappa_matches_detector_on_the_returned_state() {
        let w = world();
        let (mut s, _) = w.reset(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..400 {
            let a = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let out = w.step(&mut s, a);
            assert_eq!(out.kappa, w.safety_detector(&s));
        }
    }

    #[test]
    fn ppm_header_and_payload() {
        let o = Observation::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let mut buf = Vec::new();
        o.write_ppm(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[1, 3, 5, 2, 4, 6]);
    }

    #[test]
    fn trace_lines_are_json() {
        let mut buf = Vec::new();
        write_trace(&[TraceStep { step: 0, action: [0.5, -1.0], reward: 0.25, kappa: 1 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"step\":0,\"action\":[0.5,-1.0],\"reward\":0.25,\"kappa\":1}\n");
    }
}
