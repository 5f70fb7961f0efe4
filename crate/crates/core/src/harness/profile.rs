use std::fs;
use std::path::Path;

use super::run::{load_config, ProfileDump, PROFILE_FILE};
use crate::error::{Error, Result};

/// Banded weight curves, one per selected step.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightProfile {
    pub band_width: usize,
    pub steps: Vec<u64>,
    /// `curves[i][b]` is the mean weight of band `b` at `steps[i]`; `None` past the rollout length.
    pub curves: Vec<Vec<Option<f64>>>,
}

impl WeightProfile {
    pub fn to_csv(&self) -> String {
        let bands = self.curves.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("band_start");
        for s in &self.steps {
            out.push_str(&format!(",step_{s}"));
        }
        out.push('\n');
        for b in 0..bands {
            out.push_str(&(b * self.band_width).to_string());
            for curve in &self.curves {
                out.push(',');
                if let Some(Some(v)) = curve.get(b) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn read_profile_dumps(run_dir: &Path) -> Result<Vec<ProfileDump>> {
    let path = run_dir.join(PROFILE_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::io(format!("reading profile dumps {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Per-band mean loss weight for every recorded step divisible by `stride`.
pub fn emit_weight_profile(run_dir: &Path, stride: u64) -> Result<WeightProfile> {
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let band_width = load_config(run_dir)?.profile_band_width;
    let dumps = read_profile_dumps(run_dir)?;
    let selected: Vec<&ProfileDump> = dumps.iter().filter(|d| d.step % stride == 0).collect();
    if selected.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{} has no profile dumps at a multiple of stride {stride}",
            run_dir.display()
        )));
    }
    let curves = selected
        .iter()
        .map(|d| {
            d.mean_weight
                .chunks(band_width)
                .map(|c| Some(c.iter().sum::<f64>() / c.len() as f64))
                .collect()
        })
        .collect();
    Ok(WeightProfile {
        band_width,
        steps: selected.iter().map(|d| d.step).collect(),
        curves,
    })
}
