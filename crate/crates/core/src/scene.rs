//! Scenes, datasets, the scene text format and the synthetic generator.
//!
//! File layout (UTF-8, `\n` line endings):
//!
//! ```text
//! #SCENES v1 t_obs=3 t_pred=2
//! s0|0|0,0 1,0 2,0 / 3,0 4,0;5,5 5,6 5,7 / 5,8 5,9
//! ```
//!
//! One scene per line: `scene_id|focal_index|agent;agent;...`, where an agent
//! is its observed points, ` / `, then its future points. Coordinates carry at
//! most 9 significant digits. A scene with map context appends `|<context>`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

pub type Point = [f64; 2];

const HEADER_PREFIX: &str = "#SCENES v1";

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
}

impl AgentTrack {
    pub fn new(observed: Vec<Point>, future: Vec<Point>) -> Self {
        Self { observed, future }
    }

    pub fn last_observed(&self) -> Point {
        *self.observed.last().expect("agent with empty history")
    }

    fn is_finite(&self) -> bool {
        self.observed
            .iter()
            .chain(&self.future)
            .all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

/// One driving sample: agent tracks, the focal agent, and optional map context.
///
/// The map context is carried through I/O untouched; nothing in this crate
/// reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<AgentTrack>,
    pub focal_index: usize,
    pub map_context: Option<String>,
}

impl Scene {
    pub fn new(scene_id: impl Into<String>, agents: Vec<AgentTrack>, focal_index: usize) -> Result<Self> {
        let scene = Self {
            scene_id: scene_id.into(),
            agents,
            focal_index,
            map_context: None,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Agent count. Every agent in the record counts, moving or not.
    pub fn density(&self) -> usize {
        self.agents.len()
    }

    pub fn focal(&self) -> &AgentTrack {
        &self.agents[self.focal_index]
    }

    pub fn t_obs(&self) -> usize {
        self.agents.first().map_or(0, |a| a.observed.len())
    }

    pub fn t_pred(&self) -> usize {
        self.agents.first().map_or(0, |a| a.future.len())
    }

    /// The same scene with every position shifted by `offset`.
    pub fn translated(&self, offset: Point) -> Scene {
        let shift = |p: &Point| [p[0] + offset[0], p[1] + offset[1]];
        Scene {
            scene_id: self.scene_id.clone(),
            agents: self
                .agents
                .iter()
                .map(|a| AgentTrack::new(a.observed.iter().map(shift).collect(), a.future.iter().map(shift).collect()))
                .collect(),
            focal_index: self.focal_index,
            map_context: self.map_context.clone(),
        }
    }

    fn invalid(&self, msg: impl Into<String>) -> Error {
        Error::InvalidScene {
            id: self.scene_id.clone(),
            msg: msg.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_id.is_empty() || self.scene_id.contains(['|', '\n', '\r']) {
            return Err(self.invalid("scene id must be non-empty and contain no `|` or line breaks"));
        }
        if self.agents.is_empty() {
            return Err(self.invalid("scene has no agents"));
        }
        if self.focal_index >= self.agents.len() {
            return Err(self.invalid(format!(
                "focal index {} out of range for {} agents",
                self.focal_index,
                self.agents.len()
            )));
        }
        let (t_obs, t_pred) = (self.t_obs(), self.t_pred());
        if t_obs < 2 || t_pred < 1 {
            return Err(self.invalid(format!("need t_obs >= 2 and t_pred >= 1, got {t_obs}/{t_pred}")));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.observed.len() != t_obs || a.future.len() != t_pred {
                return Err(self.invalid(format!("agent {i} has ragged horizons")));
            }
            if !a.is_finite() {
                return Err(self.invalid(format!("agent {i} has non-finite coordinates")));
            }
        }
        if let Some(ctx) = &self.map_context {
            if ctx.contains(['|', '\n', '\r']) {
                return Err(self.invalid("map context must contain no `|` or line breaks"));
            }
        }
        Ok(())
    }
}

/// An ordered collection of scenes sharing the same horizons.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Dataset {
    pub fn new(t_obs: usize, t_pred: usize, scenes: Vec<Scene>) -> Result<Self> {
        if t_obs < 2 || t_pred < 1 {
            return Err(Error::InvalidConfig(format!(
                "need t_obs >= 2 and t_pred >= 1, got {t_obs}/{t_pred}"
            )));
        }
        let mut seen = HashSet::with_capacity(scenes.len());
        for s in &scenes {
            s.validate()?;
            if s.t_obs() != t_obs || s.t_pred() != t_pred {
                return Err(Error::HorizonMismatch {
                    expected_obs: t_obs,
                    expected_pred: t_pred,
                    obs: s.t_obs(),
                    pred: s.t_pred(),
                });
            }
            if !seen.insert(s.scene_id.as_str()) {
                return Err(Error::DuplicateId(s.scene_id.clone()));
            }
        }
        Ok(Self { scenes, t_obs, t_pred })
    }

    pub fn empty(t_obs: usize, t_pred: usize) -> Result<Self> {
        Self::new(t_obs, t_pred, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.scenes.iter().map(|s| s.scene_id.as_str())
    }

    /// Scenes whose id is in `ids`, in dataset order.
    ///
    /// Fails if any id is unknown.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Dataset> {
        let wanted: HashSet<&str> = ids.iter().map(|s| s.as_ref()).collect();
        let known: HashSet<&str> = self.ids().collect();
        if let Some(missing) = wanted.iter().find(|id| !known.contains(*id)) {
            return Err(Error::Membership(format!("scene `{missing}` is not in the dataset")));
        }
        Ok(Dataset {
            scenes: self
                .scenes
                .iter()
                .filter(|s| wanted.contains(s.scene_id.as_str()))
                .cloned()
                .collect(),
            t_obs: self.t_obs,
            t_pred: self.t_pred,
        })
    }

    /// Canonical text serialization.
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX} t_obs={} t_pred={}\n", self.t_obs, self.t_pred);
        for s in &self.scenes {
            write_scene(&mut out, s);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (t_obs, t_pred) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => return Err(parse_err(1, "missing header")),
        };
        let mut scenes = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let scene = parse_scene(line, lineno)?;
            if scene.t_obs() != t_obs || scene.t_pred() != t_pred {
                return Err(Error::HorizonMismatch {
                    expected_obs: t_obs,
                    expected_pred: t_pred,
                    obs: scene.t_obs(),
                    pred: scene.t_pred(),
                });
            }
            if !seen.insert(scene.scene_id.clone()) {
                return Err(Error::DuplicateId(scene.scene_id));
            }
            scenes.push(scene);
        }
        Ok(Self { scenes, t_obs, t_pred })
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_text(&text)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_text()).map_err(|e| Error::io(path, e))
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let rest = line
        .strip_prefix(HEADER_PREFIX)
        .ok_or_else(|| parse_err(1, format!("expected `{HEADER_PREFIX} t_obs=<int> t_pred=<int>`")))?;
    let mut t_obs = None;
    let mut t_pred = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("t_obs", v)) => t_obs = v.parse::<usize>().ok(),
            Some(("t_pred", v)) => t_pred = v.parse::<usize>().ok(),
            _ => return Err(parse_err(1, format!("unexpected header token `{tok}`"))),
        }
    }
    match (t_obs, t_pred) {
        (Some(o), Some(p)) if o >= 2 && p >= 1 => Ok((o, p)),
        _ => Err(parse_err(1, "header needs t_obs >= 2 and t_pred >= 1")),
    }
}

fn parse_scene(line: &str, lineno: usize) -> Result<Scene> {
    let mut fields = line.split('|');
    let id = fields.next().unwrap_or_default();
    let focal = fields
        .next()
        .ok_or_else(|| parse_err(lineno, "missing focal index"))?
        .parse::<usize>()
        .map_err(|e| parse_err(lineno, format!("bad focal index: {e}")))?;
    let agents_field = fields.next().ok_or_else(|| parse_err(lineno, "missing agent list"))?;
    let map_context = fields.next().map(str::to_owned);
    if fields.next().is_some() {
        return Err(parse_err(lineno, "too many `|`-separated fields"));
    }
    let agents = agents_field
        .split(';')
        .map(|a| parse_agent(a, lineno))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene {
        scene_id: id.to_owned(),
        agents,
        focal_index: focal,
        map_context,
    };
    scene.validate().map_err(|e| parse_err(lineno, e.to_string()))?;
    Ok(scene)
}

fn parse_agent(text: &str, lineno: usize) -> Result<AgentTrack> {
    let (obs, fut) = text
        .split_once(" / ")
        .ok_or_else(|| parse_err(lineno, format!("agent `{text}` lacks ` / ` separator")))?;
    Ok(AgentTrack::new(parse_points(obs, lineno)?, parse_points(fut, lineno)?))
}

fn parse_points(text: &str, lineno: usize) -> Result<Vec<Point>> {
    text.split(' ')
        .map(|tok| {
            let (x, y) = tok
                .split_once(',')
                .ok_or_else(|| parse_err(lineno, format!("bad point `{tok}`")))?;
            let parse = |v: &str| {
                v.parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| parse_err(lineno, format!("bad coordinate `{v}`")))
            };
            Ok([parse(x)?, parse(y)?])
        })
        .collect()
}

fn write_scene(out: &mut String, s: &Scene) {
    let _ = write!(out, "{}|{}|", s.scene_id, s.focal_index);
    for (i, a) in s.agents.iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        write_points(out, &a.observed);
        out.push_str(" / ");
        write_points(out, &a.future);
    }
    if let Some(ctx) = &s.map_context {
        out.push('|');
        out.push_str(ctx);
    }
}

fn write_points(out: &mut String, pts: &[Point]) {
    for (i, p) in pts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(&format_coord(p[0]));
        out.push(',');
        out.push_str(&format_coord(p[1]));
    }
}

/// Plain decimal with at most 9 significant digits and no trailing zeros.
pub fn format_coord(x: f64) -> String {
    if x == 0.0 {
        return "0".to_owned();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let int_len = exp + 1;
    let mut s = String::with_capacity(digits.len() + 8);
    if negative {
        s.push('-');
    }
    if int_len <= 0 {
        s.push_str("0.");
        s.extend(std::iter::repeat_n('0', (-int_len) as usize));
        s.push_str(&digits);
    } else if int_len as usize >= digits.len() {
        s.push_str(&digits);
        s.extend(std::iter::repeat_n('0', int_len as usize - digits.len()));
        return s;
    } else {
        s.push_str(&digits[..int_len as usize]);
        s.push('.');
        s.push_str(&digits[int_len as usize..]);
    }
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    trimmed.to_owned()
}

/// Rounds `x` to the value the scene format stores for it.
pub fn canonical_coord(x: f64) -> f64 {
    format_coord(x).parse().expect("formatted coordinate parses")
}

/// Inclusive integer range of agent counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensityRange {
    pub min: usize,
    pub max: usize,
}

impl DensityRange {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

/// Parameters of the synthetic long-tail scene generator.
///
/// Agent counts come from a two-component mixture: with probability
/// `tail_weight` uniform over `tail`, otherwise uniform over `head`. Each agent
/// moves at constant speed, either straight or at a constant turn rate, with
/// Gaussian position noise. Denser scenes move slower and turn more often, so
/// the dense tail is a distinct regime rather than a relabelled head.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Seconds between samples.
    pub dt: f64,
    pub head: DensityRange,
    pub tail: DensityRange,
    pub tail_weight: f64,
    /// Free-flow speed range, m/s.
    pub speed: (f64, f64),
    /// Fractional speed loss at `density_ref` agents.
    pub congestion: f64,
    /// Turn probability at zero load and at full load, where load is `density / density_ref` capped at 1.
    pub turn_prob: (f64, f64),
    /// Turn-rate magnitude range, rad/s.
    pub turn_rate: (f64, f64),
    pub density_ref: f64,
    /// Initial headings are uniform in `±heading_spread` radians.
    pub heading_spread: f64,
    /// Neighbor distance from the focal agent at the first observed step, m.
    pub neighbor_radius: (f64, f64),
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scenes: 1000,
            t_obs: 8,
            t_pred: 12,
            dt: 0.1,
            head: DensityRange::new(2, 10),
            tail: DensityRange::new(40, 80),
            tail_weight: 0.1,
            speed: (6.0, 12.0),
            congestion: 0.6,
            turn_prob: (0.1, 0.8),
            turn_rate: (0.2, 0.6),
            density_ref: 80.0,
            heading_spread: std::f64::consts::FRAC_PI_6,
            neighbor_radius: (1.0, 6.0),
            noise_std: 0.05,
        }
    }
}

impl SynthConfig {
    /// All scenes have exactly `density` agents.
    pub fn with_fixed_density(mut self, density: usize) -> Self {
        self.head = DensityRange::new(density, density);
        self.tail = self.head;
        self.tail_weight = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_scenes == 0 {
            return bad("num_scenes must be >= 1".into());
        }
        if self.t_obs < 2 || self.t_pred < 1 {
            return bad(format!("need t_obs >= 2 and t_pred >= 1, got {}/{}", self.t_obs, self.t_pred));
        }
        for (name, r) in [("head", self.head), ("tail", self.tail)] {
            if r.min < 1 || r.min > r.max {
                return bad(format!("{name} density range {}..={} is invalid", r.min, r.max));
            }
        }
        if !(0.0..=1.0).contains(&self.tail_weight) {
            return bad(format!("tail_weight {} outside [0, 1]", self.tail_weight));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if !(ordered(self.speed) && ordered(self.turn_rate) && ordered(self.neighbor_radius)) {
            return bad("speed, turn_rate and neighbor_radius must be finite non-negative ranges".into());
        }
        // turn_prob may decrease with density, so only bounds are checked.
        let (a, b) = self.turn_prob;
        if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) {
            return bad("turn probabilities must lie in [0, 1]".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(0.0..1.0).contains(&self.congestion) {
            return bad(format!("congestion {} outside [0, 1)", self.congestion));
        }
        if !(self.density_ref > 0.0) || !(self.noise_std >= 0.0) || !(self.heading_spread >= 0.0) {
            return bad("density_ref must be positive; noise_std and heading_spread non-negative".into());
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset. Scene ids are `syn<seed>-<index>`; the
/// focal agent is always agent 0. Coordinates are rounded to the stored
/// precision so that saving and reloading is lossless.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = rng::substream(seed, rng::streams::SYNTH);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let horizon = config.t_obs + config.t_pred;
    let mut scenes = Vec::with_capacity(config.num_scenes);
    for idx in 0..config.num_scenes {
        let range = if rng.random_bool(config.tail_weight) { config.tail } else { config.head };
        let density = rng.random_range(range.min..=range.max);
        let load = (density as f64 / config.density_ref).min(1.0);
        let origin = [rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)];

        let mut agents = Vec::with_capacity(density);
        for a in 0..density {
            let start = if a == 0 {
                origin
            } else {
                let r = uniform(&mut rng, config.neighbor_radius);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                [origin[0] + r * phi.cos(), origin[1] + r * phi.sin()]
            };
            let mut heading = if config.heading_spread > 0.0 {
                rng.random_range(-config.heading_spread..=config.heading_spread)
            } else {
                0.0
            };
            let speed = uniform(&mut rng, config.speed) * (1.0 - config.congestion * load);
            let p_turn = config.turn_prob.0 + (config.turn_prob.1 - config.turn_prob.0) * load;
            let omega = if rng.random_bool(p_turn.clamp(0.0, 1.0)) {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * uniform(&mut rng, config.turn_rate)
            } else {
                0.0
            };

            let mut pos = start;
            let mut track = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let jitter = [noise.sample(&mut rng), noise.sample(&mut rng)];
                track.push([canonical_coord(pos[0] + jitter[0]), canonical_coord(pos[1] + jitter[1])]);
                pos = [
                    pos[0] + speed * config.dt * heading.cos(),
                    pos[1] + speed * config.dt * heading.sin(),
                ];
                heading += omega * config.dt;
            }
            let future = track.split_off(config.t_obs);
            agents.push(AgentTrack::new(track, future));
        }
        scenes.push(Scene {
            scene_id: format!("syn{seed}-{idx}"),
            agents,
            focal_index: 0,
            map_context: None,
        });
    }
    Dataset::new(config.t_obs, config.t_pred, scenes)
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_agent_text() -> &'static str {
        "#SCENES v1 t_obs=3 t_pred=2\n\
         a|1|0,0 1,0 2,0 / 3,0 4,0;5,5 5,6 5,7 / 5,8 5,9;-1.5,2 -1,2 -0.5,2 / 0,2 0.5,2\n"
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let ds = Dataset::from_text("#SCENES v1 t_obs=4 t_pred=6\n").unwrap();
        assert!(ds.is_empty());
        assert_eq!((ds.t_obs, ds.t_pred), (4, 6));
        assert_eq!(ds.to_text(), "#SCENES v1 t_obs=4 t_pred=6\n");
    }

    #[test]
    fn three_agent_scene_has_density_three() {
        let ds = Dataset::from_text(three_agent_text()).unwrap();
        assert_eq!(ds.scenes[0].density(), 3);
        assert_eq!(ds.scenes[0].focal_index, 1);
        assert_eq!(ds.scenes[0].agents[2].future[1], [0.5, 2.0]);
        // serializes exactly three agent records
        let line = ds.to_text().lines().nth(1).unwrap().to_owned();
        assert_eq!(line.split('|').nth(2).unwrap().split(';').count(), 3);
    }

    #[test]
    fn canonical_text_round_trips_bytes() {
        let text = three_agent_text();
        let ds = Dataset::from_text(text).unwrap();
        assert_eq!(ds.to_text(), text);
    }

    #[test]
    fn non_canonical_input_reaches_fixed_point() {
        let text = "#SCENES v1 t_obs=2 t_pred=1\nx|0|1.000,2.50 3.1234567891,-0.000 / 1e2,0.1\n";
        let once = Dataset::from_text(text).unwrap().to_text();
        let twice = Dataset::from_text(&once).unwrap().to_text();
        assert_eq!(once, twice);
        assert_eq!(once.lines().nth(1).unwrap(), "x|0|1,2.5 3.12345679,0 / 100,0.1");
    }

    #[test]
    fn map_context_round_trips() {
        let text = "#SCENES v1 t_obs=2 t_pred=1\nm|0|0,0 1,1 / 2,2|lanes:abc\n";
        let ds = Dataset::from_text(text).unwrap();
        assert_eq!(ds.scenes[0].map_context.as_deref(), Some("lanes:abc"));
        assert_eq!(ds.to_text(), text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "#SCENES v1 t_obs=2 t_pred=1\nok|0|0,0 1,1 / 2,2\nbad|0|0,0 1,1 2,2\n";
        match Dataset::from_text(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(Dataset::from_text("garbage\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(Dataset::from_text(""), Err(Error::Parse { line: 1, .. })));
        let bad_focal = "#SCENES v1 t_obs=2 t_pred=1\nf|3|0,0 1,1 / 2,2\n";
        assert!(matches!(Dataset::from_text(bad_focal), Err(Error::Parse { line: 2, .. })));
        let nan = "#SCENES v1 t_obs=2 t_pred=1\nf|0|0,NaN 1,1 / 2,2\n";
        assert!(matches!(Dataset::from_text(nan), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn horizon_mismatch_and_duplicates_are_rejected() {
        let mismatch = "#SCENES v1 t_obs=3 t_pred=1\nh|0|0,0 1,1 / 2,2\n";
        assert!(matches!(Dataset::from_text(mismatch), Err(Error::HorizonMismatch { .. })));
        let dup = "#SCENES v1 t_obs=2 t_pred=1\nd|0|0,0 1,1 / 2,2\nd|0|0,0 1,1 / 2,2\n";
        assert!(matches!(Dataset::from_text(dup), Err(Error::DuplicateId(id)) if id == "d"));
    }

    #[test]
    fn format_coord_cases() {
        assert_eq!(format_coord(0.0), "0");
        assert_eq!(format_coord(-0.0), "0");
        assert_eq!(format_coord(1.0), "1");
        assert_eq!(format_coord(-2.5), "-2.5");
        assert_eq!(format_coord(1234.5), "1234.5");
        assert_eq!(format_coord(0.000123), "0.000123");
        assert_eq!(format_coord(1.0 / 3.0), "0.333333333");
        assert_eq!(format_coord(123456789012.0), "123456789000");
        assert_eq!(format_coord(-98.76543219), "-98.7654322");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig {
            num_scenes: 50,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg, 3).unwrap();
        let b = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = generate_synthetic(&cfg, 4).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn synthetic_fixed_density() {
        let cfg = SynthConfig {
            num_scenes: 40,
            ..SynthConfig::default()
        }
        .with_fixed_density(2);
        let ds = generate_synthetic(&cfg, 0).unwrap();
        assert!(ds.scenes.iter().all(|s| s.density() == 2 && s.agents.len() == 2));
        assert!(ds.scenes.iter().all(|s| s.focal_index == 0));
    }

    #[test]
    fn synthetic_tail_share_matches_mixture_weight() {
        let cfg = SynthConfig {
            num_scenes: 10_000,
            t_obs: 2,
            t_pred: 1,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 11).unwrap();
        let high = ds.scenes.iter().filter(|s| s.density() >= 40).count();
        let share = high as f64 / ds.len() as f64;
        assert!((share - 0.10).abs() <= 0.02, "high-density share {share}");
        assert!(ds.scenes.iter().all(|s| (2..=10).contains(&s.density()) || (40..=80).contains(&s.density())));
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let zero = SynthConfig {
            num_scenes: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&zero, 0), Err(Error::InvalidConfig(_))));
        let inverted = SynthConfig {
            head: DensityRange::new(5, 3),
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&inverted, 0), Err(Error::InvalidConfig(_))));
        let weight = SynthConfig {
            tail_weight: 1.5,
            ..SynthConfig::default()
        };
        assert!(weight.validate().is_err());
    }

    #[test]
    fn synthetic_survives_save_and_load() {
        let cfg = SynthConfig {
            num_scenes: 20,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn subset_keeps_dataset_order() {
        let cfg = SynthConfig {
            num_scenes: 5,
            ..SynthConfig::default()
        };
        let ds = generate_synthetic(&cfg, 1).unwrap();
        let sub = ds.subset(&["syn1-3", "syn1-0"]).unwrap();
        assert_eq!(sub.ids().collect::<Vec<_>>(), vec!["syn1-0", "syn1-3"]);
        assert!(matches!(ds.subset(&["nope"]), Err(Error::Membership(_))));
    }

    fn arb_scene(t_obs: usize, t_pred: usize) -> impl Strategy<Value = Scene> {
        let coord = -1.0e4..1.0e4f64;
        let agent = (
            prop::collection::vec((coord.clone(), coord.clone()), t_obs),
            prop::collection::vec((coord.clone(), coord), t_pred),
        )
            .prop_map(|(o, f)| {
                let q = |v: Vec<(f64, f64)>| v.into_iter().map(|(x, y)| [canonical_coord(x), canonical_coord(y)]).collect();
                AgentTrack::new(q(o), q(f))
            });
        (prop::collection::vec(agent, 1..5), any::<prop::sample::Index>(), prop::option::of("[a-z]{0,6}"))
            .prop_map(|(agents, focal, ctx)| {
                let focal_index = focal.index(agents.len());
                Scene {
                    scene_id: String::new(),
                    agents,
                    focal_index,
                    map_context: ctx,
                }
            })
    }

    proptest! {
        #[test]
        fn load_inverts_save(scenes in prop::collection::vec(arb_scene(3, 2), 0..6)) {
            let scenes: Vec<Scene> = scenes
                .into_iter()
                .enumerate()
                .map(|(i, mut s)| { s.scene_id = format!("p{i}"); s })
                .collect();
            let ds = Dataset::new(3, 2, scenes).unwrap();
            let text = ds.to_text();
            let back = Dataset::from_text(&text).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
