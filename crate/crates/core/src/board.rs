//! Physical board layout export: map optimized spot centers from patch
//! pixels onto board centimeters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::GaussianPatchParams;

/// Default board side in centimeters.
pub const DEFAULT_BOARD_CM: f64 = 35.0;

/// Bulb positions on a square board, in centimeters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardLayout {
    pub board_cm: f64,
    /// `(id, x_cm, y_cm)` per bulb.
    pub bulbs: Vec<(usize, f64, f64)>,
    pub min_spacing_cm: f64,
    /// Pairs of bulb ids closer than the minimum spacing.
    pub warnings: Vec<String>,
}

/// Linearly map spot centers to board coordinates and flag pairs closer
/// than `min_spacing_cm`. Close bulbs warn rather than fail; they are
/// physically mergeable.
pub fn export_board(
    params: &GaussianPatchParams,
    side_px: usize,
    board_cm: f64,
    min_spacing_cm: f64,
) -> Result<BoardLayout> {
    if side_px == 0 {
        return Err(Error::InvalidParam("side_px must be >= 1".into()));
    }
    if board_cm <= 0.0 {
        return Err(Error::InvalidParam("board size must be positive".into()));
    }
    params.validate(side_px)?;
    let scale = board_cm / side_px as f64;
    let bulbs: Vec<(usize, f64, f64)> = params
        .centers
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| (i, x * scale, y * scale))
        .collect();
    let mut warnings = Vec::new();
    for i in 0..bulbs.len() {
        for j in i + 1..bulbs.len() {
            let dx = bulbs[i].1 - bulbs[j].1;
            let dy = bulbs[i].2 - bulbs[j].2;
            let dist = (dx * dx + dy * dy).sqrt();
            if dist < min_spacing_cm {
                warnings.push(format!(
                    "bulbs {} and {} are {:.3} cm apart (minimum {:.3} cm)",
                    bulbs[i].0, bulbs[j].0, dist, min_spacing_cm
                ));
            }
        }
    }
    Ok(BoardLayout {
        board_cm,
        bulbs,
        min_spacing_cm,
        warnings,
    })
}

impl BoardLayout {
    /// Plain text table `id x_cm y_cm`, warnings as `#` comments.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# board {:.2} x {:.2} cm\n", self.board_cm, self.board_cm));
        for w in &self.warnings {
            out.push_str(&format!("# warning: {w}\n"));
        }
        out.push_str("# id\tx_cm\ty_cm\n");
        for (id, x, y) in &self.bulbs {
            out.push_str(&format!("{id}\t{x:.4}\t{y:.4}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_table()).map_err(|e| Error::io(path, e))
    }
}
