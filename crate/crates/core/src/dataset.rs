//! NGSIM-schema trajectory data: parsing, one-on-one merge extraction, a
//! synthetic generator, and the replay environment for offline training.
//!
//! Frames are 10 Hz. `Local_X` is the lateral coordinate and `Local_Y` the
//! longitudinal one; simulated positions use `(Local_X, Local_Y)` directly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_with_noise, ControlInput, NoiseModel, VehicleState};
use crate::env::EnvStep;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::policy::{sample_action, PolicyParams};
use crate::rollout::{EpisodeSummary, RolloutBatch, StepRecord};
use crate::safety::{barrier, cbf_condition, pair_constraints, safety_filter, CbfConfig, CbfMode, PairGeometry};

pub const FEET_TO_METERS: f64 = 0.3048;
pub const FRAME_DT: f64 = 0.1;
pub const OFFLINE_OBS_DIM: usize = 10;
pub const OFFLINE_OBS_SCALE: [f64; OFFLINE_OBS_DIM] = [1.0, 1.0, 10.0, 10.0, 5.0, 20.0, 20.0, 10.0, 10.0, 5.0];

/// One row of trajectory data, in meters and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub vehicle_id: i64,
    pub frame_id: i64,
    /// Lateral position, m.
    pub local_x: f64,
    /// Longitudinal position, m.
    pub local_y: f64,
    pub speed: f64,
    pub accel: f64,
    pub lane_id: i64,
}

impl TrajectoryRecord {
    pub fn position(&self) -> [f64; 2] {
        [self.local_x, self.local_y]
    }
}

/// Source column names for each record field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame_id: String,
    pub local_x: String,
    pub local_y: String,
    pub speed: String,
    pub accel: String,
    pub lane_id: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vehicle_id: "Vehicle_ID".into(),
            frame_id: "Frame_ID".into(),
            local_x: "Local_X".into(),
            local_y: "Local_Y".into(),
            speed: "v_Vel".into(),
            accel: "v_Acc".into(),
            lane_id: "Lane_ID".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    #[default]
    Feet,
    Meters,
}

impl Units {
    pub fn to_meters(self) -> f64 {
        match self {
            Units::Feet => FEET_TO_METERS,
            Units::Meters => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the source, header included.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseReport {
    pub records: Vec<TrajectoryRecord>,
    pub errors: Vec<RowError>,
}

impl ParseReport {
    pub fn error_text(&self) -> String {
        let mut s = String::new();
        for e in &self.errors {
            let _ = writeln!(s, "line {}: {}", e.line, e.message);
        }
        s
    }
}

fn parse_int(cell: &str) -> std::result::Result<i64, String> {
    if let Ok(v) = cell.parse::<i64>() {
        return Ok(v);
    }
    match cell.parse::<f64>() {
        Ok(f) if f.fract() == 0.0 && f.abs() < 9e15 => Ok(f as i64),
        _ => Err(format!("not an integer: {cell:?}")),
    }
}

fn parse_real(cell: &str) -> std::result::Result<f64, String> {
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(format!("not a finite number: {cell:?}")),
    }
}

/// Parses CSV with a header row. Rows with bad cells or a repeated
/// (vehicle, frame) pair are skipped and reported.
pub fn parse_trajectories<R: Read>(source: R, map: &ColumnMap, units: Units) -> Result<ParseReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = rdr.headers().map_err(|e| Error::Parse(format!("reading header: {e}")))?.clone();
    let wanted = [
        &map.vehicle_id,
        &map.frame_id,
        &map.local_x,
        &map.local_y,
        &map.speed,
        &map.accel,
        &map.lane_id,
    ];
    let mut idx = [0usize; 7];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(wanted) {
        match headers.iter().position(|h| h == name.as_str()) {
            Some(i) => *slot = i,
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Parse(format!("missing required column(s): {}", missing.join(", "))));
    }
    let k = units.to_meters();
    let mut report = ParseReport::default();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let cell = |i: usize| row.get(idx[i]).ok_or_else(|| format!("row has no column {}", wanted[i]));
        let parsed = (|| -> std::result::Result<TrajectoryRecord, String> {
            Ok(TrajectoryRecord {
                vehicle_id: parse_int(cell(0)?)?,
                frame_id: parse_int(cell(1)?)?,
                local_x: parse_real(cell(2)?)? * k,
                local_y: parse_real(cell(3)?)? * k,
                speed: parse_real(cell(4)?)? * k,
                accel: parse_real(cell(5)?)? * k,
                lane_id: parse_int(cell(6)?)?,
            })
        })();
        match parsed {
            Ok(rec) => {
                if seen.insert((rec.vehicle_id, rec.frame_id)) {
                    report.records.push(rec);
                } else {
                    report.errors.push(RowError {
                        line,
                        message: format!("duplicate (vehicle {}, frame {})", rec.vehicle_id, rec.frame_id),
                    });
                }
            }
            Err(message) => report.errors.push(RowError { line, message }),
        }
    }
    Ok(report)
}

pub fn parse_file(path: &Path, map: &ColumnMap, units: Units) -> Result<ParseReport> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectories(std::io::BufReader::new(f), map, units)
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// `|Δ Local_Y|` only.
    Longitudinal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    pub from_lane: i64,
    pub to_lane: i64,
    /// A host qualifies when strictly closer than this, m.
    pub threshold: f64,
    pub distance: DistanceMetric,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            from_lane: 7,
            to_lane: 6,
            threshold: 12.0,
            distance: DistanceMetric::Euclidean,
        }
    }
}

impl ExtractConfig {
    pub fn distance(&self, a: &TrajectoryRecord, b: &TrajectoryRecord) -> f64 {
        match self.distance {
            DistanceMetric::Euclidean => (a.local_x - b.local_x).hypot(a.local_y - b.local_y),
            DistanceMetric::Longitudinal => (a.local_y - b.local_y).abs(),
        }
    }
}

/// One ego/host pair over their longest common run of consecutive frames
/// containing the merge frame. `ego[i]` and `host[i]` share a frame id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEpisode {
    pub ego_id: i64,
    pub host_id: i64,
    pub merge_frame: i64,
    /// Index of `merge_frame` within `ego` and `host`.
    pub alignment_offset: usize,
    pub ego: Vec<TrajectoryRecord>,
    pub host: Vec<TrajectoryRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub episodes: Vec<MergeEpisode>,
    /// Vehicles whose first frame is in the from-lane.
    pub candidates: usize,
    /// Candidates that never met a qualifying host.
    pub dropped: usize,
}

/// For every ego starting in `from_lane`, the first frame in `to_lane` with
/// a host in `to_lane` within the threshold; nearest host wins, then the
/// smaller vehicle id. Independent of input order.
pub fn extract_merge_pairs(records: &[TrajectoryRecord], cfg: &ExtractConfig) -> Extraction {
    let mut by_vehicle: BTreeMap<i64, Vec<TrajectoryRecord>> = BTreeMap::new();
    let mut to_lane_by_frame: HashMap<i64, Vec<TrajectoryRecord>> = HashMap::new();
    for r in records {
        by_vehicle.entry(r.vehicle_id).or_default().push(*r);
        if r.lane_id == cfg.to_lane {
            to_lane_by_frame.entry(r.frame_id).or_default().push(*r);
        }
    }
    for v in by_vehicle.values_mut() {
        v.sort_by_key(|r| r.frame_id);
    }
    let mut out = Extraction::default();
    for (&ego_id, ego_recs) in &by_vehicle {
        if ego_recs[0].lane_id != cfg.from_lane {
            continue;
        }
        out.candidates += 1;
        let hit = ego_recs.iter().filter(|r| r.lane_id == cfg.to_lane).find_map(|e| {
            to_lane_by_frame
                .get(&e.frame_id)?
                .iter()
                .filter(|h| h.vehicle_id != ego_id)
                .map(|h| (cfg.distance(e, h), h.vehicle_id))
                .filter(|(d, _)| *d < cfg.threshold)
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .map(|(_, host)| (e.frame_id, host))
        });
        match hit {
            Some((frame, host_id)) => out.episodes.push(build_episode(ego_id, host_id, frame, ego_recs, &by_vehicle[&host_id])),
            None => out.dropped += 1,
        }
    }
    out
}

fn build_episode(
    ego_id: i64,
    host_id: i64,
    merge_frame: i64,
    ego: &[TrajectoryRecord],
    host: &[TrajectoryRecord],
) -> MergeEpisode {
    let e: HashMap<i64, &TrajectoryRecord> = ego.iter().map(|r| (r.frame_id, r)).collect();
    let h: HashMap<i64, &TrajectoryRecord> = host.iter().map(|r| (r.frame_id, r)).collect();
    let both = |f: i64| e.contains_key(&f) && h.contains_key(&f);
    let mut first = merge_frame;
    while both(first - 1) {
        first -= 1;
    }
    let mut last = merge_frame;
    while both(last + 1) {
        last += 1;
    }
    MergeEpisode {
        ego_id,
        host_id,
        merge_frame,
        alignment_offset: (merge_frame - first) as usize,
        ego: (first..=last).map(|f| *e[&f]).collect(),
        host: (first..=last).map(|f| *h[&f]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeIndexEntry {
    pub index: usize,
    pub ego_id: i64,
    pub host_id: i64,
    pub merge_frame: i64,
    pub alignment_offset: usize,
    pub frames: usize,
    pub file: String,
}

pub fn episode_csv(ep: &MergeEpisode) -> String {
    let mut s = String::from(
        "frame,ego_x,ego_y,ego_speed,ego_accel,ego_lane,host_x,host_y,host_speed,host_accel,host_lane\n",
    );
    for (e, h) in ep.ego.iter().zip(&ep.host) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.frame_id, e.local_x, e.local_y, e.speed, e.accel, e.lane_id, h.local_x, h.local_y, h.speed, h.accel, h.lane_id
        );
    }
    s
}

/// Writes `episodes/index.json`, one CSV per episode and `errors.txt`.
pub fn write_extraction(dir: &Path, extraction: &Extraction, parse_errors: &[RowError]) -> Result<()> {
    let ep_dir = dir.join("episodes");
    std::fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
    let mut index = Vec::with_capacity(extraction.episodes.len());
    for (i, ep) in extraction.episodes.iter().enumerate() {
        let file = format!("episode_{i:04}.csv");
        let path = ep_dir.join(&file);
        std::fs::write(&path, episode_csv(ep)).map_err(|e| Error::io(&path, e))?;
        index.push(EpisodeIndexEntry {
            index: i,
            ego_id: ep.ego_id,
            host_id: ep.host_id,
            merge_frame: ep.merge_frame,
            alignment_offset: ep.alignment_offset,
            frames: ep.ego.len(),
            file,
        });
    }
    let path = ep_dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))?;
    let mut errors = String::new();
    for e in parse_errors {
        let _ = writeln!(errors, "line {}: {}", e.line, e.message);
    }
    let _ = writeln!(
        errors,
        "extraction: {} candidates, {} episodes, {} dropped without a qualifying host",
        extraction.candidates,
        extraction.episodes.len(),
        extraction.dropped
    );
    let path = dir.join("errors.txt");
    std::fs::write(&path, errors).map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    /// Lane-7 egos that merge next to a host within `host_distance_range`.
    pub merges: usize,
    /// Lane-7 egos whose host stays beyond `decoy_distance_range`.
    pub decoys: usize,
    /// Extra vehicles per scenario in lanes 2–4.
    pub through_vehicles: usize,
    pub frames_per_scenario: usize,
    pub lane_change_frames: usize,
    pub lane_width: f64,
    pub speed_range: [f64; 2],
    /// Amplitude of the sinusoidal speed variation, m/s.
    pub speed_amplitude: f64,
    /// Euclidean ego/host distance at the lane crossing, m.
    pub host_distance_range: [f64; 2],
    pub decoy_distance_range: [f64; 2],
    /// Std of Gaussian noise added to written positions, m.
    pub position_noise: f64,
    pub units: Units,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            merges: 40,
            decoys: 5,
            through_vehicles: 2,
            frames_per_scenario: 150,
            lane_change_frames: 30,
            lane_width: 3.66,
            speed_range: [8.0, 14.0],
            speed_amplitude: 1.5,
            host_distance_range: [9.0, 11.5],
            decoy_distance_range: [15.0, 25.0],
            position_noise: 0.0,
            units: Units::Feet,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frames_per_scenario >= self.lane_change_frames + 40
            && self.lane_change_frames >= 2
            && self.lane_width > 0.0
            && self.speed_range[0] > self.speed_amplitude
            && self.speed_range[0] <= self.speed_range[1]
            && self.host_distance_range[0] > self.lane_width
            && self.host_distance_range[0] <= self.host_distance_range[1]
            && self.decoy_distance_range[0] <= self.decoy_distance_range[1]
            && self.position_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid synthetic dataset config: {self:?}")))
        }
    }
}

fn lane_center(lane: i64, width: f64) -> f64 {
    (lane as f64 - 0.5) * width
}

fn lane_of(x: f64, width: f64) -> i64 {
    (x / width).floor() as i64 + 1
}

/// Positions for `n` frames plus two extra, so forward-difference speed and
/// acceleration exist for every written frame.
struct Track {
    id: i64,
    first_frame: i64,
    pos: Vec<[f64; 2]>,
    lane: Vec<i64>,
}

struct ScenarioOut {
    tracks: Vec<Track>,
    /// Expected merge frame for planted merges.
    merge_frame: Option<i64>,
}

fn speed_profile(rng: &mut RngStream, cfg: &SyntheticConfig) -> impl Fn(f64) -> f64 {
    let v0 = rng.uniform(cfg.speed_range[0], cfg.speed_range[1]);
    let amp = cfg.speed_amplitude;
    let omega = rng.uniform(0.2, 0.6);
    let phase = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    // Closed-form integral of v0 + amp·sin(ωt + φ).
    move |t: f64| v0 * t + amp / omega * (phase.cos() - (omega * t + phase).cos())
}

fn merge_scenario(cfg: &SyntheticConfig, rng: &mut RngStream, id0: i64, frame0: i64, decoy: bool) -> ScenarioOut {
    let n = cfg.frames_per_scenario + 2;
    let w = cfg.lane_width;
    let (x7, x6) = (lane_center(7, w), lane_center(6, w));
    let y_of = speed_profile(rng, cfg);
    let y0 = rng.uniform(50.0, 300.0);
    let change_start = 10 + rng.index(cfg.frames_per_scenario - cfg.lane_change_frames - 30);
    let lc = cfg.lane_change_frames as f64;
    let x_of = |k: usize| {
        if k <= change_start {
            x7
        } else if k >= change_start + cfg.lane_change_frames {
            x6
        } else {
            let s = (k - change_start) as f64 / lc;
            x7 - (x7 - x6) * 0.5 * (1.0 - (std::f64::consts::PI * s).cos())
        }
    };
    let ego_pos: Vec<[f64; 2]> = (0..n).map(|k| [x_of(k), y0 + y_of(k as f64 * FRAME_DT)]).collect();
    let ego_lane: Vec<i64> = ego_pos.iter().map(|p| lane_of(p[0], w)).collect();
    let crossing = ego_lane.iter().position(|&l| l == 6).expect("lane change crosses into lane 6");
    let lat = (ego_pos[crossing][0] - x6).abs();
    let range = if decoy { cfg.decoy_distance_range } else { cfg.host_distance_range };
    let d = rng.uniform(range[0], range[1]);
    let gap = (d * d - lat * lat).sqrt();
    let ahead = if rng.uniform(0.0, 1.0) < 0.5 { 1.0 } else { -1.0 };
    let host_pos: Vec<[f64; 2]> = ego_pos.iter().map(|p| [x6, p[1] + ahead * gap]).collect();
    let mut tracks = vec![
        Track {
            id: id0,
            first_frame: frame0,
            pos: ego_pos,
            lane: ego_lane,
        },
        Track {
            id: id0 + 1,
            first_frame: frame0,
            lane: vec![6; n],
            pos: host_pos,
        },
    ];
    for j in 0..cfg.through_vehicles {
        let lane = 2 + (j as i64 % 3);
        let y_of = speed_profile(rng, cfg);
        let y0 = rng.uniform(0.0, 400.0);
        let x = lane_center(lane, w);
        tracks.push(Track {
            id: id0 + 2 + j as i64,
            first_frame: frame0,
            pos: (0..n).map(|k| [x, y0 + y_of(k as f64 * FRAME_DT)]).collect(),
            lane: vec![lane; n],
        });
    }
    ScenarioOut {
        tracks,
        merge_frame: (!decoy).then_some(frame0 + crossing as i64),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub csv: String,
    /// `(ego id, merge frame)` for every planted merge.
    pub planted: Vec<(i64, i64)>,
}

pub const SYNTHETIC_HEADER: &str = "Vehicle_ID,Frame_ID,Total_Frames,Global_Time,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID";

/// Kinematically consistent NGSIM-schema data: recorded speed is the
/// forward-difference speed of the (noise-free) positions and acceleration
/// the forward difference of speed.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig, rng: &RngStream) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let scenarios = cfg.merges + cfg.decoys;
    let mut out = String::from(SYNTHETIC_HEADER);
    out.push('\n');
    let mut planted = Vec::new();
    let k = 1.0 / cfg.units.to_meters();
    let stride = 10 * (cfg.through_vehicles as i64 + 2).max(10);
    let mut noise = rng.substream("noise");
    for s in 0..scenarios {
        let mut srng = rng.substream(&format!("scenario/{s}"));
        let id0 = 1 + s as i64 * stride;
        let frame0 = 1 + s as i64 * (cfg.frames_per_scenario as i64 + 20);
        let decoy = s >= cfg.merges;
        let sc = merge_scenario(cfg, &mut srng, id0, frame0, decoy);
        if let Some(f) = sc.merge_frame {
            planted.push((id0, f));
        }
        for tr in &sc.tracks {
            let n = cfg.frames_per_scenario;
            let speed: Vec<f64> = (0..=n)
                .map(|i| {
                    let (a, b) = (tr.pos[i], tr.pos[i + 1]);
                    (b[0] - a[0]).hypot(b[1] - a[1]) / FRAME_DT
                })
                .collect();
            for i in 0..n {
                let accel = (speed[i + 1] - speed[i]) / FRAME_DT;
                let frame = tr.first_frame + i as i64;
                let (mut x, mut y) = (tr.pos[i][0], tr.pos[i][1]);
                if cfg.position_noise > 0.0 {
                    x += cfg.position_noise * noise.standard_normal();
                    y += cfg.position_noise * noise.standard_normal();
                }
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    tr.id,
                    frame,
                    n,
                    frame * 100,
                    x * k,
                    y * k,
                    speed[i] * k,
                    accel * k,
                    tr.lane[i]
                );
            }
        }
    }
    Ok(SyntheticDataset { csv: out, planted })
}

// ---------------------------------------------------------------------------
// Offline replay environment
// ---------------------------------------------------------------------------

/// Dataset state of one vehicle at one frame, with heading from position
/// differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub frame: i64,
    pub pos: [f64; 2],
    pub speed: f64,
    pub accel: f64,
    pub heading: f64,
}

impl ReplayFrame {
    pub fn direction(&self) -> [f64; 2] {
        [self.heading.cos(), self.heading.sin()]
    }

    pub fn velocity(&self) -> [f64; 2] {
        let d = self.direction();
        [self.speed * d[0], self.speed * d[1]]
    }

    pub fn state(&self) -> VehicleState {
        let v = self.velocity();
        let mut s = VehicleState::new(self.pos[0], self.pos[1], v[0], v[1]);
        s.heading = self.heading;
        s
    }
}

fn replay_frames(recs: &[TrajectoryRecord]) -> Vec<ReplayFrame> {
    let n = recs.len();
    let raw: Vec<Option<f64>> = (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (i, i + 1) } else { (i.saturating_sub(1), i) };
            let dx = recs[b].local_x - recs[a].local_x;
            let dy = recs[b].local_y - recs[a].local_y;
            (dx.hypot(dy) > 1e-9).then(|| dy.atan2(dx))
        })
        .collect();
    // Standstill frames keep the nearest known heading.
    let fallback = raw.iter().flatten().next().copied().unwrap_or(std::f64::consts::FRAC_PI_2);
    let mut last = fallback;
    recs.iter()
        .zip(raw)
        .map(|(r, h)| {
            let heading = h.unwrap_or(last);
            last = heading;
            ReplayFrame {
                frame: r.frame_id,
                pos: r.position(),
                speed: r.speed,
                accel: r.accel,
                heading,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineEpisode {
    pub ego_id: i64,
    pub host_id: i64,
    pub merge_index: usize,
    pub ego: Vec<ReplayFrame>,
    pub host: Vec<ReplayFrame>,
}

impl OfflineEpisode {
    pub fn from_merge(ep: &MergeEpisode) -> Self {
        Self {
            ego_id: ep.ego_id,
            host_id: ep.host_id,
            merge_index: ep.alignment_offset,
            ego: replay_frames(&ep.ego),
            host: replay_frames(&ep.host),
        }
    }

    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }
}

fn offline_cbf() -> CbfConfig {
    CbfConfig {
        dt: FRAME_DT,
        mode: CbfMode::Coupled,
        ..CbfConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineEnvConfig {
    pub cbf: CbfConfig,
    pub ego_noise: NoiseModel,
    /// Uncertainty attributed to the replayed host in the chance
    /// constraint; the host itself is never perturbed.
    pub host_noise: NoiseModel,
    pub safety_filter: bool,
}

impl Default for OfflineEnvConfig {
    fn default() -> Self {
        Self {
            cbf: offline_cbf(),
            ego_noise: NoiseModel::isotropic(0.01),
            host_noise: NoiseModel::zero(),
            safety_filter: true,
        }
    }
}

impl OfflineEnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.cbf.validate()?;
        if (self.cbf.dt - FRAME_DT).abs() > 1e-12 {
            return Err(Error::Config(format!("offline cbf.dt must equal the frame period {FRAME_DT}")));
        }
        self.ego_noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.host_noise.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// One replay step as written to trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineTick {
    pub frame: i64,
    pub ego: VehicleState,
    pub data_ego: [f64; 2],
    pub host: [f64; 2],
    pub raw_action: f64,
    pub filtered: [f64; 2],
    pub h: Vec<f64>,
    pub infeasible: bool,
}

/// Simulated ego against a replayed dataset episode.
#[derive(Debug, Clone)]
pub struct OfflineEnv<'a> {
    ep: &'a OfflineEpisode,
    cfg: &'a OfflineEnvConfig,
    k: usize,
    ego: VehicleState,
    rng: RngStream,
    prev_action: f64,
    min_distance: f64,
    checks: usize,
    violations: usize,
    infeasible: usize,
    tracking_sum: f64,
    record: Option<Vec<OfflineTick>>,
}

impl<'a> OfflineEnv<'a> {
    /// Ego initialized at the dataset state of frame index `start`.
    pub fn new(ep: &'a OfflineEpisode, cfg: &'a OfflineEnvConfig, start: usize, rng: RngStream) -> Result<Self> {
        if start + 1 >= ep.len() {
            return Err(Error::domain(format!(
                "start index {start} leaves no step in an episode of {} frames",
                ep.len()
            )));
        }
        let ego = ep.ego[start].state();
        let d0 = dist(ego.position(), ep.host[start].pos);
        Ok(Self {
            ep,
            cfg,
            k: start,
            ego,
            rng,
            prev_action: 0.0,
            min_distance: d0,
            checks: 0,
            violations: 0,
            infeasible: 0,
            tracking_sum: 0.0,
            record: None,
        })
    }

    pub fn start_recording(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn take_record(&mut self) -> Vec<OfflineTick> {
        self.record.take().unwrap_or_default()
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn frame_index(&self) -> usize {
        self.k
    }

    pub fn is_done(&self) -> bool {
        self.k + 1 >= self.ep.len()
    }

    pub fn tracking_error(&self) -> f64 {
        dist(self.ego.position(), self.ep.ego[self.k].pos)
    }

    /// Tracking error (2), sim speed, data speed, data acceleration,
    /// Δx, Δy, Δvx, Δvy to the host, previous action.
    pub fn observation(&self) -> [f64; OFFLINE_OBS_DIM] {
        let d = &self.ep.ego[self.k];
        let h = &self.ep.host[self.k];
        let hv = h.velocity();
        [
            self.ego.x - d.pos[0],
            self.ego.y - d.pos[1],
            self.ego.speed(),
            d.speed,
            d.accel,
            self.ego.x - h.pos[0],
            self.ego.y - h.pos[1],
            self.ego.vx - hv[0],
            self.ego.vy - hv[1],
            self.prev_action,
        ]
    }

    pub fn features(&self) -> Vec<f64> {
        self.observation().iter().zip(OFFLINE_OBS_SCALE).map(|(v, s)| v / s).collect()
    }

    pub fn step(&mut self, action: f64) -> Result<EnvStep> {
        if self.is_done() {
            return Err(Error::domain("offline episode already finished"));
        }
        if !action.is_finite() {
            return Err(Error::domain(format!("non-finite action {action}")));
        }
        let cfg = self.cfg;
        let data = self.ep.ego[self.k];
        let next = self.ep.ego[self.k + 1];
        let host = self.ep.host[self.k].state();
        let dir = data.direction();
        let nominal = ControlInput::new(action * dir[0], action * dir[1]);
        let pair = PairGeometry::between(&self.ego, &cfg.ego_noise, &host, &cfg.host_noise);
        let constraints = pair_constraints(&pair, &cfg.cbf)?;
        let out = if cfg.safety_filter {
            safety_filter(&nominal, &constraints, &cfg.cbf)
        } else {
            safety_filter(&nominal, &[], &cfg.cbf)
        };
        let eps = cfg.ego_noise.sample(&mut self.rng)?;
        let deps = [eps[0] - cfg.host_noise.mean[0], eps[1] - cfg.host_noise.mean[1]];
        let axes = cfg.cbf.axes();
        self.checks += 1;
        if axes.iter().any(|&ax| cbf_condition(&pair, &cfg.cbf, ax, &out.u, deps) < 0.0) {
            self.violations += 1;
        }
        if out.infeasible {
            self.infeasible += 1;
        }
        let h: Vec<f64> = axes.iter().map(|&ax| barrier(&pair, &cfg.cbf, ax)).collect();
        let mut ego = step_with_noise(&self.ego, &out.u, eps, cfg.ego_noise.channel, FRAME_DT)?;
        // Heading tracking: keep the along-track speed, turn it onto the
        // next dataset heading.
        let v_t = ego.vx * dir[0] + ego.vy * dir[1];
        let nd = next.direction();
        ego.vx = v_t * nd[0];
        ego.vy = v_t * nd[1];
        if v_t.abs() > crate::dynamics::HEADING_SPEED_EPS {
            ego.heading = crate::dynamics::normalize_angle(ego.vy.atan2(ego.vx));
        }
        self.ego = ego;
        self.k += 1;
        self.prev_action = action.clamp(cfg.cbf.u_min, cfg.cbf.u_max);
        let host_next = self.ep.host[self.k].pos;
        self.min_distance = self.min_distance.min(dist(self.ego.position(), host_next));
        let err = self.tracking_error();
        self.tracking_sum += err;
        if let Some(rec) = self.record.as_mut() {
            rec.push(OfflineTick {
                frame: self.ep.ego[self.k].frame,
                ego: self.ego,
                data_ego: self.ep.ego[self.k].pos,
                host: host_next,
                raw_action: action,
                filtered: out.u.as_array(),
                h,
                infeasible: out.infeasible,
            });
        }
        Ok(EnvStep {
            reward: -err,
            done: self.is_done(),
            reached_goal: false,
            constraints,
            action_map: dir,
            action_offset: [0.0, 0.0],
            filtered: out.u.as_array(),
            infeasible: out.infeasible,
        })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OfflineRolloutSpec {
    pub trajectories: usize,
    pub length: usize,
    pub gamma: f64,
    pub stochastic: bool,
    pub record: bool,
}

#[derive(Debug, Clone, Default)]
pub struct OfflineRollouts {
    pub batch: RolloutBatch,
    pub trajectories: Vec<Vec<OfflineTick>>,
}

/// Rollouts from random dataset states: trajectory `i` picks its episode
/// and start frame from `rng.substream("traj/i")`.
pub fn collect_offline_rollouts(
    actor: &PolicyParams,
    episodes: &[OfflineEpisode],
    cfg: &OfflineEnvConfig,
    spec: &OfflineRolloutSpec,
    rng: &RngStream,
) -> Result<OfflineRollouts> {
    let usable: Vec<&OfflineEpisode> = episodes.iter().filter(|e| e.len() >= 2).collect();
    if usable.is_empty() || spec.trajectories == 0 || spec.length == 0 {
        return Err(Error::domain("offline rollouts need episodes with >= 2 frames, trajectories and length"));
    }
    if actor.obs_dim() != OFFLINE_OBS_DIM || actor.action_dim() != 1 {
        return Err(Error::Dimension {
            expected: OFFLINE_OBS_DIM,
            got: actor.obs_dim(),
        });
    }
    let mut out = OfflineRollouts::default();
    for i in 0..spec.trajectories {
        let mut trng = rng.substream(&format!("traj/{i}"));
        let ep = usable[trng.index(usable.len())];
        let max_start = ep.len().saturating_sub(spec.length + 1);
        let start = trng.index(max_start + 1);
        let mut env = OfflineEnv::new(ep, cfg, start, trng.substream("noise"))?;
        if spec.record {
            env.start_recording();
        }
        let mut prng = trng.substream("policy");
        let mut steps = 0;
        while steps < spec.length && !env.is_done() {
            let obs = env.features();
            let (mean, std) = actor.forward(&obs)?;
            let action = if spec.stochastic {
                sample_action(&mean, &std, &mut prng)?
            } else {
                mean
            };
            let res = env.step(action[0])?;
            steps += 1;
            out.batch.steps.push(StepRecord {
                episode: i,
                obs,
                raw_action: action,
                filtered_action: res.filtered,
                action_map: vec![res.action_map],
                action_offset: res.action_offset,
                reward: res.reward,
                ret: 0.0,
                advantage: 0.0,
                constraints: res.constraints,
                done: res.done || steps == spec.length,
                infeasible: res.infeasible,
            });
        }
        out.batch.episodes.push(EpisodeSummary {
            index: i,
            seed: rng.seed(),
            initial_offset: start as f64,
            min_distance: env.min_distance,
            steps,
            terminated_early: steps < spec.length,
            reached_goal: false,
            merge_time: None,
            cbf_checks: env.checks,
            cbf_violations: env.violations,
            infeasible_ticks: env.infeasible,
            mean_tracking_error: Some(env.tracking_sum / steps.max(1) as f64),
        });
        if spec.record {
            out.trajectories.push(env.take_record());
        }
    }
    out.batch.compute_returns(spec.gamma);
    Ok(out)
}

pub fn offline_trajectory_csv(ticks: &[OfflineTick], cbf: &CbfConfig) -> String {
    let mut s = String::from("frame,ego_x,ego_y,ego_vx,ego_vy,data_x,data_y,host_x,host_y,raw_action,filtered_ux,filtered_uy");
    for c in crate::env::barrier_columns(cbf) {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",infeasible\n");
    for r in ticks {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            r.ego.x,
            r.ego.y,
            r.ego.vx,
            r.ego.vy,
            r.data_ego[0],
            r.data_ego[1],
            r.host[0],
            r.host[1],
            r.raw_action,
            r.filtered[0],
            r.filtered[1]
        );
        for h in &r.h {
            let _ = write!(s, ",{h}");
        }
        let _ = writeln!(s, ",{}", u8::from(r.infeasible));
    }
    s
}

/// Episode indices split into train / validation / test by shuffling with
/// `rng`. Every non-empty split fraction gets at least one episode when
/// there are enough episodes.
pub fn split_episodes(n: usize, train: f64, val: f64, rng: &RngStream) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.substream("split"));
    let test_frac = (1.0 - train - val).max(0.0);
    let mut n_val = (val * n as f64).round() as usize;
    let mut n_test = (test_frac * n as f64).round() as usize;
    if n >= 3 {
        n_val = n_val.max(usize::from(val > 0.0));
        n_test = n_test.max(usize::from(test_frac > 0.0));
    }
    n_val = n_val.min(n);
    n_test = n_test.min(n - n_val);
    let n_train = n - n_val - n_test;
    let test = idx.split_off(n_train + n_val);
    let val_set = idx.split_off(n_train);
    (idx, val_set, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID\n";

    fn rec(v: i64, f: i64, x: f64, y: f64, lane: i64) -> TrajectoryRecord {
        TrajectoryRecord {
            vehicle_id: v,
            frame_id: f,
            local_x: x,
            local_y: y,
            speed: 10.0,
            accel: 0.0,
            lane_id: lane,
        }
    }

    #[test]
    fn empty_body_parses_to_nothing() {
        let r = parse_trajectories(HEADER.as_bytes(), &ColumnMap::default(), Units::Feet).unwrap();
        assert!(r.records.is_empty() && r.errors.is_empty());
    }

    #[test]
    fn feet_converted_to_meters() {
        let src = format!("{HEADER}1,1,0.0,100.0,10,0,7\n");
        let r = parse_trajectories(src.as_bytes(), &ColumnMap::default(), Units::Feet).unwrap();
        assert!((r.records[0].local_y - 30.48).abs() < 1e-12);
    }

    #[test]
    fn duplicates_and_bad_cells_reported_with_lines() {
        let src = format!("{HEADER}1,1,0,0,0,0,7\n1,1,0,0,0,0,7\n2,1,x,0,0,0,6\n3,1,0,0,0,0,6\n");
        let r = parse_trajectories(src.as_bytes(), &ColumnMap::default(), Units::Meters).unwrap();
        assert_eq!(r.records.len(), 2);
        let lines: Vec<u64> = r.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 4]);
        assert!(r.errors[0].message.contains("duplicate"));
    }

    #[test]
    fn missing_column_is_fatal() {
        let src = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID\n";
        match parse_trajectories(src.as_bytes(), &ColumnMap::default(), Units::Feet) {
            Err(Error::Parse(msg)) => assert!(msg.contains("v_Acc")),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn single_merge_found_at_crossing() {
        let mut recs = Vec::new();
        for f in 0..10 {
            let lane = if f < 5 { 7 } else { 6 };
            recs.push(rec(1, f, if f < 5 { 22.0 } else { 20.0 }, f as f64, lane));
            recs.push(rec(2, f, 20.0, f as f64 + 10.0, 6));
        }
        let ex = extract_merge_pairs(&recs, &ExtractConfig::default());
        assert_eq!(ex.episodes.len(), 1);
        let ep = &ex.episodes[0];
        assert_eq!((ep.ego_id, ep.host_id, ep.merge_frame), (1, 2, 5));
        assert_eq!(ep.alignment_offset, 5);
        assert_eq!(ep.ego.len(), 10);
    }

    #[test]
    fn far_host_yields_nothing() {
        let mut recs = Vec::new();
        for f in 0..10 {
            recs.push(rec(1, f, 20.0, f as f64, if f < 3 { 7 } else { 6 }));
            recs.push(rec(2, f, 20.0, f as f64 + 30.0, 6));
        }
        let ex = extract_merge_pairs(&recs, &ExtractConfig::default());
        assert!(ex.episodes.is_empty());
        assert_eq!((ex.candidates, ex.dropped), (1, 1));
    }

    #[test]
    fn nearest_host_then_smaller_id() {
        let mut recs = Vec::new();
        for f in 0..4 {
            recs.push(rec(1, f, 20.0, 0.0, if f < 2 { 7 } else { 6 }));
            recs.push(rec(5, f, 20.0, 9.0, 6));
            recs.push(rec(4, f, 20.0, -6.0, 6));
            recs.push(rec(3, f, 20.0, 6.0, 6));
        }
        let ex = extract_merge_pairs(&recs, &ExtractConfig::default());
        assert_eq!(ex.episodes[0].host_id, 3);
    }

    #[test]
    fn episode_truncated_at_frame_gap() {
        let mut recs = Vec::new();
        for f in 0..10 {
            recs.push(rec(1, f, 20.0, f as f64, if f < 4 { 7 } else { 6 }));
            if f != 7 {
                recs.push(rec(2, f, 20.0, f as f64 + 5.0, 6));
            }
        }
        let ep = &extract_merge_pairs(&recs, &ExtractConfig::default()).episodes[0];
        assert_eq!(ep.ego.first().unwrap().frame_id, 0);
        assert_eq!(ep.ego.last().unwrap().frame_id, 6);
    }

    #[test]
    fn synthetic_round_trip_recovers_planted_merges() {
        let cfg = SyntheticConfig {
            merges: 6,
            decoys: 2,
            ..Default::default()
        };
        let data = generate_synthetic_dataset(&cfg, &RngStream::new(3)).unwrap();
        let again = generate_synthetic_dataset(&cfg, &RngStream::new(3)).unwrap();
        assert_eq!(data.csv, again.csv);
        let parsed = parse_trajectories(data.csv.as_bytes(), &ColumnMap::default(), Units::Feet).unwrap();
        assert!(parsed.errors.is_empty());
        let ex = extract_merge_pairs(&parsed.records, &ExtractConfig::default());
        let found: Vec<(i64, i64)> = ex.episodes.iter().map(|e| (e.ego_id, e.merge_frame)).collect();
        assert_eq!(found, data.planted);
        assert_eq!(ex.dropped, 2);
    }

    #[test]
    fn zero_vehicles_gives_header_only() {
        let cfg = SyntheticConfig {
            merges: 0,
            decoys: 0,
            ..Default::default()
        };
        let data = generate_synthetic_dataset(&cfg, &RngStream::new(0)).unwrap();
        assert_eq!(data.csv, format!("{SYNTHETIC_HEADER}\n"));
    }

    fn synthetic_episodes() -> Vec<OfflineEpisode> {
        let cfg = SyntheticConfig {
            merges: 3,
            decoys: 0,
            ..Default::default()
        };
        let data = generate_synthetic_dataset(&cfg, &RngStream::new(11)).unwrap();
        let parsed = parse_trajectories(data.csv.as_bytes(), &ColumnMap::default(), Units::Feet).unwrap();
        extract_merge_pairs(&parsed.records, &ExtractConfig::default())
            .episodes
            .iter()
            .map(OfflineEpisode::from_merge)
            .collect()
    }

    #[test]
    fn replaying_recorded_accel_reproduces_data() {
        let cfg = OfflineEnvConfig {
            ego_noise: NoiseModel::zero(),
            safety_filter: false,
            ..Default::default()
        };
        for ep in &synthetic_episodes() {
            let mut env = OfflineEnv::new(ep, &cfg, 0, RngStream::new(0)).unwrap();
            while !env.is_done() {
                let a = ep.ego[env.frame_index()].accel;
                let r = env.step(a).unwrap();
                assert!(r.reward.abs() < 1e-6, "reward {} at {}", r.reward, env.frame_index());
            }
        }
    }

    #[test]
    fn zero_action_from_standstill_stays_put() {
        let recs: Vec<TrajectoryRecord> = (0..5)
            .map(|f| TrajectoryRecord {
                speed: 0.0,
                ..rec(1, f, 20.0, 0.0, 6)
            })
            .collect();
        let host: Vec<TrajectoryRecord> = (0..5).map(|f| rec(2, f, 20.0, 40.0 + f as f64, 6)).collect();
        let ep = OfflineEpisode::from_merge(&MergeEpisode {
            ego_id: 1,
            host_id: 2,
            merge_frame: 0,
            alignment_offset: 0,
            ego: recs,
            host,
        });
        let cfg = OfflineEnvConfig {
            ego_noise: NoiseModel::zero(),
            ..Default::default()
        };
        let mut env = OfflineEnv::new(&ep, &cfg, 0, RngStream::new(0)).unwrap();
        while !env.is_done() {
            let r = env.step(0.0).unwrap();
            assert_eq!(r.reward, 0.0);
        }
        assert_eq!(env.ego().position(), [20.0, 0.0]);
    }

    #[test]
    fn split_partitions_all_indices() {
        let (a, b, c) = split_episodes(20, 0.8, 0.1, &RngStream::new(1));
        assert_eq!((a.len(), b.len(), c.len()), (16, 2, 2));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }
}
