//! Latency benchmark over a grid of sampler settings.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::{SamplerConfig, Session};
use crate::codec::PatchCodec;
use crate::error::{contract, io_err, Result};
use crate::model::Model;
use crate::scene::SceneRecord;

pub const BENCH_HEADER: &str =
    "steps,kv_cache,cfg_scale,cond_cache,mean_s_per_frame,model_evals_per_frame";
const GRID_HEADER: &str = "steps,kv_cache,cfg_scale,cond_cache";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub steps: usize,
    pub kv_cache: bool,
    pub cfg_scale: f32,
    pub cond_cache: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub row: BenchRow,
    pub mean_s_per_frame: f64,
    pub median_s_per_frame: f64,
    pub model_evals_per_frame: f64,
    pub frames: usize,
}

/// Steps 1 to 5 with every optimisation on, then 20-step rows that switch the
/// optimisations off one at a time.
pub fn default_grid() -> Vec<BenchRow> {
    let fast = |steps| BenchRow {
        steps,
        kv_cache: true,
        cfg_scale: 1.0,
        cond_cache: true,
    };
    let mut rows: Vec<BenchRow> = (1..=5).map(fast).collect();
    rows.push(fast(20));
    rows.push(BenchRow {
        kv_cache: false,
        ..fast(20)
    });
    rows.push(BenchRow {
        kv_cache: false,
        cfg_scale: 2.0,
        ..fast(20)
    });
    rows.push(BenchRow {
        kv_cache: false,
        cfg_scale: 2.0,
        cond_cache: false,
        ..fast(20)
    });
    rows
}

fn parse_flag(s: &str, line: usize) -> Result<bool> {
    match s {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => contract(format!("grid line {line}: expected on/off, got `{s}`")),
    }
}

/// Parses a grid file: an optional `steps,kv_cache,cfg_scale,cond_cache` header, then one
/// row per line. Blank lines and `#` comments are ignored.
pub fn parse_grid(text: &str) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.replace(' ', "") == GRID_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return contract(format!(
                "grid line {}: expected 4 fields, got {}",
                i + 1,
                fields.len()
            ));
        }
        let steps = fields[0].parse().map_err(|_| {
            crate::FarError::Contract(format!("grid line {}: bad steps `{}`", i + 1, fields[0]))
        })?;
        let cfg_scale = fields[2].parse().map_err(|_| {
            crate::FarError::Contract(format!(
                "grid line {}: bad cfg_scale `{}`",
                i + 1,
                fields[2]
            ))
        })?;
        let row = BenchRow {
            steps,
            kv_cache: parse_flag(fields[1], i + 1)?,
            cfg_scale,
            cond_cache: parse_flag(fields[3], i + 1)?,
        };
        row_config(&row, 0).validate()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return contract("grid has no rows");
    }
    Ok(rows)
}

fn row_config(row: &BenchRow, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps: row.steps,
        cfg_scale: row.cfg_scale,
        kv_cache: row.kv_cache,
        cond_cache: row.cond_cache,
        seed,
        ..Default::default()
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// For each row, seeds a session with `history` ground-truth frames of `scene` and times
/// the generation (including decoding) of the following `frames` frames.
pub fn bench(
    model: &Model,
    codec: &PatchCodec,
    scene: &SceneRecord,
    rows: &[BenchRow],
    history: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<BenchResult>> {
    if frames == 0 {
        return contract("bench needs at least one timed frame");
    }
    if scene.frames_len() < history + frames {
        return contract(format!(
            "bench scene has {} frames, needs {}",
            scene.frames_len(),
            history + frames
        ));
    }
    let cfg = &model.config;
    let (v, h, w) = (cfg.views, cfg.image_height, cfg.image_width);
    let mut results = Vec::with_capacity(rows.len());
    for row in rows {
        let mut session = Session::new(model, row_config(row, seed))?;
        for t in 0..history {
            session.push_reference(
                codec.encode_tokens(scene.frame(t), v, h, w)?,
                &scene.controls[t],
            )?;
        }
        let before = session.counters();
        let mut times = Vec::with_capacity(frames);
        for t in history..history + frames {
            let start = Instant::now();
            let z = session.sample_frame(&scene.controls[t])?;
            codec.decode_tokens(&z, v, h, w)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let evals = session.counters().model_evals - before.model_evals;
        results.push(BenchResult {
            row: *row,
            mean_s_per_frame: times.iter().sum::<f64>() / frames as f64,
            median_s_per_frame: median(&times),
            model_evals_per_frame: evals as f64 / frames as f64,
            frames,
        });
    }
    Ok(results)
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut text = String::from(BENCH_HEADER);
    text.push('\n');
    let flag = |b: bool| if b { "on" } else { "off" };
    for r in results {
        writeln!(
            text,
            "{},{},{},{},{:.6},{}",
            r.row.steps,
            flag(r.row.kv_cache),
            r.row.cfg_scale,
            flag(r.row.cond_cache),
            r.mean_s_per_frame,
            r.model_evals_per_frame
        )
        .unwrap();
    }
    text
}

pub fn write_bench_csv(path: &Path, results: &[BenchResult]) -> Result<()> {
    std::fs::write(path, bench_csv(results)).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_table_layout() {
        let g = default_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(
            g.iter().map(|r| r.steps).collect::<Vec<_>>(),
            vec![1, 2, 3, 4, 5, 20, 20, 20, 20]
        );
        assert!(g[..6]
            .iter()
            .all(|r| r.kv_cache && r.cond_cache && r.cfg_scale == 1.0));
        assert!(!g[6].kv_cache && g[6].cfg_scale == 1.0);
        assert!(!g[7].kv_cache && g[7].cfg_scale == 2.0 && g[7].cond_cache);
        assert!(!g[8].kv_cache && g[8].cfg_scale == 2.0 && !g[8].cond_cache);
    }

    #[test]
    fn grid_round_trips_through_text() {
        let text = "steps,kv_cache,cfg_scale,cond_cache\n# comment\n3,on,1,on\n\n20, off, 2, off\n";
        let rows = parse_grid(text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[1],
            BenchRow {
                steps: 20,
                kv_cache: false,
                cfg_scale: 2.0,
                cond_cache: false
            }
        );
    }

    #[test]
    fn bad_grid_lines_are_rejected() {
        assert!(parse_grid("3,maybe,1,on").is_err());
        assert!(parse_grid("0,on,1,on").is_err());
        assert!(parse_grid("3,on,1").is_err());
        assert!(parse_grid("").is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let r = BenchResult {
            row: default_grid()[2],
            mean_s_per_frame: 0.5,
            median_s_per_frame: 0.4,
            model_evals_per_frame: 3.0,
            frames: 4,
        };
        let csv = bench_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(BENCH_HEADER));
        assert_eq!(lines.next(), Some("3,on,1,on,0.500000,3"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
