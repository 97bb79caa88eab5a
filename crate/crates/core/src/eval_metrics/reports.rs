//! CSV/JSON reports and entropy heatmaps.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::codec_networks::ImageBuffer;
use crate::entropy_engine::{channel_entropy_profile, ChannelEntropyRanking, GaussianParams};
use crate::error::{Error, Result};
use crate::model::CodecModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::evaluate::Evaluation;

/// Entropy analysis of one image: per-element bits `[c, h, w]` and the
/// channel ranking.
#[derive(Clone, Debug)]
pub struct EntropyReport {
    pub image: String,
    pub map: Tensor<f64>,
    pub ranking: ChannelEntropyRanking,
}

/// Eval-mode entropy map of the model's latent for `image`.
pub fn entropy_report<T: Scalar>(model: &CodecModel<T>, name: &str, image: &ImageBuffer) -> Result<EntropyReport> {
    let out = model.evaluate(&crate::codec_networks::pad_image(image))?;
    let params = GaussianParams::new(out.mu.value().clone(), out.sigma.value().clone())?;
    let (map, ranking) = channel_entropy_profile(out.y_hat.value(), &params)?;
    let (_, c, h, w) = map.dims4();
    Ok(EntropyReport {
        image: name.to_string(),
        map: map.cast::<f64>().reshape(&[c, h, w])?,
        ranking,
    })
}

/// 8-bit min–max normalization of one plane; a constant plane maps to 128.
pub fn normalize_plane(values: &[f64]) -> (Vec<u8>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let px = if max > min {
        values
            .iter()
            .map(|&v| ((v - min) / (max - min) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; values.len()]
    };
    (px, min, max)
}

/// Binary PGM (P5) bytes.
pub fn pgm_bytes(width: usize, height: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Metric(format!("{}: {e}", path.display())))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Metric(format!("csv: {e}"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Files written by [`emit_reports`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub metrics_csv: Option<PathBuf>,
    pub aggregate_json: Option<PathBuf>,
    pub entropy_csvs: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
    pub heatmap_index: Option<PathBuf>,
}

/// Write `metrics.csv` and `aggregate.json` for an evaluation, and for each
/// entropy report a `<image>.entropy.csv` profile plus one PGM heatmap per
/// requested 1-based rank, indexed with their value ranges in `heatmaps.csv`.
pub fn emit_reports(
    out_dir: &Path,
    evaluation: Option<&Evaluation>,
    entropy: &[EntropyReport],
    ranks: &BTreeSet<usize>,
) -> Result<ReportFiles> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = ReportFiles::default();

    if let Some(ev) = evaluation {
        let path = out_dir.join("metrics.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["image", "bpp", "psnr_db", "msssim", "msssim_db", "enc_s", "dec_s"])
            .map_err(csv_err)?;
        for r in &ev.images {
            let p = &r.point;
            w.write_record([
                r.image.clone(),
                p.bpp.to_string(),
                p.psnr_db.to_string(),
                fmt_opt(p.msssim),
                fmt_opt(p.msssim_db),
                p.enc_seconds.to_string(),
                p.dec_seconds.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        files.metrics_csv = Some(path);

        let path = out_dir.join("aggregate.json");
        write(&path, serde_json::to_string_pretty(&ev.aggregate)?.as_bytes())?;
        files.aggregate_json = Some(path);
    }

    if !entropy.is_empty() {
        let index_path = out_dir.join("heatmaps.csv");
        let mut index = csv_writer(&index_path)?;
        index
            .write_record(["image", "rank", "channel", "min_bits", "max_bits", "file"])
            .map_err(csv_err)?;
        for rep in entropy {
            let stem = Path::new(&rep.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| rep.image.clone());
            let path = out_dir.join(format!("{stem}.entropy.csv"));
            let mut w = csv_writer(&path)?;
            w.write_record(["channel", "mean_entropy_bits", "rank"]).map_err(csv_err)?;
            let channel_rank = rep.ranking.ranks();
            for (c, e) in rep.ranking.mean_entropy.iter().enumerate() {
                w.write_record([c.to_string(), e.to_string(), (channel_rank[c] + 1).to_string()])
                    .map_err(csv_err)?;
            }
            w.flush()?;
            files.entropy_csvs.push(path);

            let [c, h, wd] = [rep.map.shape()[0], rep.map.shape()[1], rep.map.shape()[2]];
            for &rank in ranks {
                if rank == 0 || rank > c {
                    return Err(Error::Invalid(format!("heatmap rank {rank} outside 1..={c}")));
                }
                let channel = rep.ranking.order[rank - 1];
                let plane = &rep.map.data()[channel * h * wd..(channel + 1) * h * wd];
                let (px, min, max) = normalize_plane(plane);
                let name = format!("{stem}.rank{rank}.ch{channel}.pgm");
                let path = out_dir.join(&name);
                write(&path, &pgm_bytes(wd, h, &px))?;
                index
                    .write_record([
                        rep.image.clone(),
                        rank.to_string(),
                        channel.to_string(),
                        min.to_string(),
                        max.to_string(),
                        name,
                    ])
                    .map_err(csv_err)?;
                files.heatmaps.push(path);
            }
        }
        index.flush()?;
        files.heatmap_index = Some(index_path);
    }
    Ok(files)
}
