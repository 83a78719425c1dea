//! Per-stage evaluation of a synthesized manifest.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{estoi, seg_snr, si_snr, MetricsError};
use crate::audio::read_wav;
use crate::dsp::SAMPLE_RATE;
use crate::pipeline::{Engine, Mode};
use crate::room::Manifest;

pub const SNR_BUCKETS: [i32; 5] = [-3, 0, 3, 6, 9];
const SEG_FRAME: usize = 320;

pub type EnhanceError = Box<dyn std::error::Error + Send + Sync>;

/// Anything that maps a noisy 16 kHz signal to an enhanced one of the same
/// length at a given stage depth.
pub trait Enhancer: Sync {
    fn enhance(&self, noisy: &[f64], depth: usize) -> Result<Vec<f64>, EnhanceError>;
}

/// The engine run offline or streaming.
pub struct ChainEnhancer<'a> {
    pub engine: &'a Engine,
    pub mode: Mode,
}

impl Enhancer for ChainEnhancer<'_> {
    fn enhance(&self, noisy: &[f64], depth: usize) -> Result<Vec<f64>, EnhanceError> {
        Ok(self.engine.enhance(noisy, SAMPLE_RATE, depth, self.mode)?.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub estoi: f64,
    pub si_snr: f64,
    pub seg_snr: f64,
}

impl Scores {
    pub fn of(clean: &[f64], processed: &[f64]) -> Result<Self, MetricsError> {
        Ok(Self {
            estoi: estoi(clean, processed)?,
            si_snr: si_snr(clean, processed)?,
            seg_snr: seg_snr(clean, processed, SEG_FRAME)?,
        })
    }

    fn mean<'a>(items: impl Iterator<Item = &'a Scores>) -> (usize, Scores) {
        let mut n = 0;
        let mut acc = Scores::default();
        for s in items {
            n += 1;
            acc.estoi += s.estoi;
            acc.si_snr += s.si_snr;
            acc.seg_snr += s.seg_snr;
        }
        if n > 0 {
            let k = n as f64;
            acc = Scores {
                estoi: acc.estoi / k,
                si_snr: acc.si_snr / k,
                seg_snr: acc.seg_snr / k,
            };
        }
        (n, acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub index: usize,
    pub snr_db: f64,
    pub bucket: i32,
    /// One entry per requested depth, in request order.
    pub scores: Vec<Scores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub depth: usize,
    /// `None` for the average over all buckets.
    pub bucket: Option<i32>,
    pub count: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub depths: Vec<usize>,
    pub rows: Vec<ReportRow>,
    pub overall: Vec<ReportRow>,
    pub pairs: Vec<PairScores>,
}

pub fn snr_bucket(snr_db: f64) -> i32 {
    *SNR_BUCKETS
        .iter()
        .min_by(|a, b| {
            (**a as f64 - snr_db)
                .abs()
                .total_cmp(&(**b as f64 - snr_db).abs())
        })
        .expect("non-empty")
}

fn depth_label(depth: usize) -> String {
    if depth == 0 {
        "Noisy".into()
    } else {
        format!("Stage {depth}")
    }
}

impl EvalReport {
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn from_pairs(depths: Vec<usize>, pairs: Vec<PairScores>) -> Self {
        let mut rows = Vec::new();
        let mut overall = Vec::new();
        for (di, &depth) in depths.iter().enumerate() {
            for &b in &SNR_BUCKETS {
                let (count, scores) = Scores::mean(
                    pairs
                        .iter()
                        .filter(|p| p.bucket == b)
                        .map(|p| &p.scores[di]),
                );
                if count > 0 {
                    rows.push(ReportRow {
                        depth,
                        bucket: Some(b),
                        count,
                        scores,
                    });
                }
            }
            let (count, scores) = Scores::mean(pairs.iter().map(|p| &p.scores[di]));
            if count > 0 {
                overall.push(ReportRow {
                    depth,
                    bucket: None,
                    count,
                    scores,
                });
            }
        }
        Self {
            depths,
            rows,
            overall,
            pairs,
        }
    }

    fn lookup(&self, depth: usize, bucket: Option<i32>) -> Option<&ReportRow> {
        let pool = if bucket.is_some() {
            &self.rows
        } else {
            &self.overall
        };
        pool.iter().find(|r| r.depth == depth && r.bucket == bucket)
    }

    /// One block per metric: rows are stage depths, columns SNR buckets and
    /// the average.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pairs: {}", self.pair_count());
        let metrics: [(&str, fn(&Scores) -> f64); 3] = [
            ("ESTOI (%)", |s| 100.0 * s.estoi),
            ("SI-SNR (dB)", |s| s.si_snr),
            ("segSNR (dB)", |s| s.seg_snr),
        ];
        for (name, get) in metrics {
            let _ = writeln!(out, "\n{name}");
            let _ = write!(out, "{:<10}", "");
            for b in SNR_BUCKETS {
                let _ = write!(out, "{:>9}", format!("{b} dB"));
            }
            let _ = writeln!(out, "{:>9}", "Avg.");
            for &d in &self.depths {
                let _ = write!(out, "{:<10}", depth_label(d));
                for b in SNR_BUCKETS.map(Some).into_iter().chain([None]) {
                    match self.lookup(d, b) {
                        Some(r) => write!(out, "{:>9.2}", get(&r.scores)),
                        None => write!(out, "{:>9}", "-"),
                    }
                    .ok();
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("depth,bucket,count,estoi,si_snr,seg_snr\n");
        for r in self.rows.iter().chain(&self.overall) {
            let bucket = r.bucket.map_or("avg".to_string(), |b| b.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.depth, bucket, r.count, r.scores.estoi, r.scores.si_snr, r.scores.seg_snr
            );
        }
        out
    }
}

fn load_pair(manifest: &Manifest, index: usize) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let rec = &manifest.records[index];
    let (noisy, r1) = read_wav(&manifest.resolve(&rec.noisy))?;
    let (target, r2) = read_wav(&manifest.resolve(&rec.target))?;
    let pair_err = |message: String| MetricsError::Pair {
        index: rec.index,
        message,
    };
    if r1 != SAMPLE_RATE || r2 != SAMPLE_RATE {
        return Err(pair_err(format!(
            "sample rates {r1}/{r2}, expected {SAMPLE_RATE}"
        )));
    }
    if noisy.len() != target.len() {
        return Err(pair_err(format!(
            "noisy has {} samples, target {}",
            noisy.len(),
            target.len()
        )));
    }
    Ok((noisy, target))
}

/// Score every pair at every depth; depth 0 is the unprocessed input.
/// Metrics use the early-reverberant target as the clean reference.
pub fn evaluate_manifest<E: Enhancer>(
    manifest: &Manifest,
    enhancer: &E,
    depths: &[usize],
) -> Result<EvalReport, MetricsError> {
    let pairs = (0..manifest.records.len())
        .into_par_iter()
        .map(|i| {
            let rec = &manifest.records[i];
            let (noisy, target) = load_pair(manifest, i)?;
            let scores = depths
                .iter()
                .map(|&d| {
                    let processed = if d == 0 {
                        noisy.clone()
                    } else {
                        enhancer
                            .enhance(&noisy, d)
                            .map_err(|e| MetricsError::Enhance {
                                index: rec.index,
                                message: e.to_string(),
                            })?
                    };
                    Scores::of(&target, &processed)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(PairScores {
                index: rec.index,
                snr_db: rec.snr_db,
                bucket: snr_bucket(rec.snr_db),
                scores,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(EvalReport::from_pairs(depths.to_vec(), pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_are_nearest() {
        assert_eq!(snr_bucket(-5.0), -3);
        assert_eq!(snr_bucket(1.4), 0);
        assert_eq!(snr_bucket(7.6), 9);
        assert_eq!(snr_bucket(14.0), 9);
    }

    #[test]
    fn averages_are_count_weighted() {
        let mk = |index, snr_db: f64, v: f64| PairScores {
            index,
            snr_db,
            bucket: snr_bucket(snr_db),
            scores: vec![Scores {
                estoi: v,
                si_snr: 10.0 * v,
                seg_snr: -v,
            }],
        };
        let pairs = vec![mk(0, -3.0, 0.1), mk(1, -3.0, 0.3), mk(2, 6.0, 0.8)];
        let r = EvalReport::from_pairs(vec![1], pairs);
        assert_eq!(r.rows.len(), 2);
        let weighted = r
            .rows
            .iter()
            .map(|row| row.count as f64 * row.scores.estoi)
            .sum::<f64>()
            / 3.0;
        assert!((r.overall[0].scores.estoi - weighted).abs() < 1e-12);
        assert!((r.overall[0].scores.estoi - 0.4).abs() < 1e-12);
        assert!(r.to_table().contains("Stage 1"));
        assert_eq!(r.to_csv().lines().count(), 4);
    }

    #[test]
    fn empty_manifest_gives_empty_report() {
        struct Id;
        impl Enhancer for Id {
            fn enhance(&self, noisy: &[f64], _: usize) -> Result<Vec<f64>, EnhanceError> {
                Ok(noisy.to_vec())
            }
        }
        let r = evaluate_manifest(&Manifest::default(), &Id, &[0, 1]).unwrap();
        assert_eq!(r.pair_count(), 0);
        assert!(r.rows.is_empty() && r.overall.is_empty());
    }
}
