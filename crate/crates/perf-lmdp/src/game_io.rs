//! Stackelberg game files: a TOML header plus three matrix CSVs.
//!
//! `r1` and `r2` are `(S·A1·A2) × 1`; `transition` is `(S·A1·A2) × S`, one
//! next-state distribution per row. Rows are ordered s-major, a1-middle,
//! a2-minor.

use std::fs;
use std::path::{Path, PathBuf};

use perf_lmdp_core::stackelberg::StackelbergGame;
use perf_lmdp_core::DMatrix;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameHeader {
    pub states: usize,
    pub leader_actions: usize,
    pub follower_actions: usize,
    pub discount: f64,
    pub softmax_beta: f64,
    pub start_dist: Vec<f64>,
    pub r1: PathBuf,
    pub r2: PathBuf,
    pub transition: PathBuf,
}

fn expect_shape(path: &Path, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<(), CliError> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(CliError::Config(format!(
            "{}: expected {}x{}, found {}x{}",
            path.display(),
            rows,
            cols,
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn read_game(path: &Path) -> Result<StackelbergGame, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
    let h: GameHeader = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let n = h.states * h.leader_actions * h.follower_actions;
    let load = |p: &Path, cols: usize| -> Result<DMatrix<f64>, CliError> {
        let full = dir.join(p);
        let m = csvio::read_matrix(&full)?.matrix;
        expect_shape(&full, &m, n, cols)?;
        Ok(m)
    };
    let r1 = load(&h.r1, 1)?;
    let r2 = load(&h.r2, 1)?;
    let p = load(&h.transition, h.states)?;
    let mut transition = Vec::with_capacity(n * h.states);
    for i in 0..n {
        transition.extend(p.row(i).iter().copied());
    }
    let game = StackelbergGame {
        num_states: h.states,
        num_leader_actions: h.leader_actions,
        num_follower_actions: h.follower_actions,
        r1: r1.as_slice().to_vec(),
        r2: r2.as_slice().to_vec(),
        transition,
        gamma: h.discount,
        softmax_beta: h.softmax_beta,
        rho: h.start_dist,
    };
    game.validate().map_err(|e| CliError::Config(format!("{}: {}", path.display(), e)))?;
    Ok(game)
}

/// Writes `game.toml`, `r1.csv`, `r2.csv` and `transition.csv` into `dir`
/// and returns the path of the header.
pub fn write_game(dir: &Path, game: &StackelbergGame) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let n = game.r1.len();
    csvio::write_matrix(&dir.join("r1.csv"), "r1", &DMatrix::from_column_slice(n, 1, &game.r1))?;
    csvio::write_matrix(&dir.join("r2.csv"), "r2", &DMatrix::from_column_slice(n, 1, &game.r2))?;
    let p = DMatrix::from_row_slice(n, game.num_states, &game.transition);
    csvio::write_matrix(&dir.join("transition.csv"), "transition", &p)?;
    let header = GameHeader {
        states: game.num_states,
        leader_actions: game.num_leader_actions,
        follower_actions: game.num_follower_actions,
        discount: game.gamma,
        softmax_beta: game.softmax_beta,
        start_dist: game.rho.clone(),
        r1: PathBuf::from("r1.csv"),
        r2: PathBuf::from("r2.csv"),
        transition: PathBuf::from("transition.csv"),
    };
    let path = dir.join("game.toml");
    fs::write(&path, toml::to_string(&header).expect("header serializes")).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}
