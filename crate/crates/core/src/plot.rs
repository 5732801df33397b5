//! Plot-ready series from a finished online run: pairwise distance, host
//! speed and filtered ego action against time, one block per episode.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::{METRICS, TRAJECTORIES};

pub const PLOT_DIR: &str = "plots";
pub const DISTANCE: &str = "distance.csv";
pub const HOST_SPEED: &str = "host_speed.csv";
pub const EGO_ACTION: &str = "ego_action.csv";

const COLUMNS: [&str; 9] = ["t", "ego_x", "ego_y", "host_x", "host_y", "host_vx", "host_vy", "filtered_ux", "filtered_uy"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotSeries {
    pub episodes: usize,
    /// Rows per episode, equal to its logged tick count.
    pub rows: Vec<usize>,
    /// Minimum distance per episode.
    pub min_distance: Vec<f64>,
}

/// Trajectory files of a run directory, in episode order.
pub fn trajectory_files(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut missing = Vec::new();
    if !run_dir.join(METRICS).is_file() {
        missing.push(METRICS.to_string());
    }
    let dir = run_dir.join(TRAJECTORIES);
    if !dir.is_dir() {
        missing.push(format!("{TRAJECTORIES}/"));
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles {
            dir: run_dir.to_path_buf(),
            missing,
        });
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("episode_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes `plots/{distance,host_speed,ego_action}.csv` under `run_dir`.
pub fn emit_plot_data(run_dir: &Path) -> Result<PlotSeries> {
    let files = trajectory_files(run_dir)?;
    let mut distance = String::from("episode,t,distance\n");
    let mut host_speed = String::from("episode,t,host_speed\n");
    let mut action = String::from("episode,t,ux,uy\n");
    let mut series = PlotSeries::default();
    for (ep, path) in files.iter().enumerate() {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?.clone();
        let mut idx = [0usize; COLUMNS.len()];
        for (slot, name) in idx.iter_mut().zip(COLUMNS) {
            *slot = headers.iter().position(|h| h == name).ok_or_else(|| {
                Error::Parse(format!("{}: no column {name:?} (not an online trajectory log)", path.display()))
            })?;
        }
        let mut rows = 0;
        let mut min_d = f64::INFINITY;
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let mut v = [0.0f64; COLUMNS.len()];
            for (k, &i) in idx.iter().enumerate() {
                let cell = row.get(i).unwrap_or("");
                v[k] = cell
                    .parse()
                    .map_err(|_| Error::Parse(format!("{}: bad number {cell:?}", path.display())))?;
            }
            let [t, ex, ey, hx, hy, hvx, hvy, ux, uy] = v;
            let d = (ex - hx).hypot(ey - hy);
            min_d = min_d.min(d);
            let _ = writeln!(distance, "{ep},{t},{d}");
            let _ = writeln!(host_speed, "{ep},{t},{}", hvx.hypot(hvy));
            let _ = writeln!(action, "{ep},{t},{ux},{uy}");
            rows += 1;
        }
        series.rows.push(rows);
        series.min_distance.push(min_d);
    }
    series.episodes = files.len();
    let dir = run_dir.join(PLOT_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (name, body) in [(DISTANCE, distance), (HOST_SPEED, host_speed), (EGO_ACTION, action)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(series)
}
