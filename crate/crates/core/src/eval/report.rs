use std::fmt::Write as _;
use std::path::Path;

use super::{EvalError, Result, ScoreMap};
use crate::model::Variant;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: String,
    pub records: usize,
    /// `None` when the class lacks normal or anomalous records.
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: usize,
    /// Pooled over every evaluated record.
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl EvalReport {
    pub fn class_mean_image_auroc(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.image_auroc))
    }

    pub fn class_mean_pixel_auroc(&self) -> Option<f64> {
        mean_defined(self.per_class.iter().map(|c| c.pixel_auroc))
    }

    /// Human-readable table in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>10}", "class", "records", "image", "pixel");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>10} {:>10}",
                c.class,
                c.records,
                pct(c.image_auroc),
                pct(c.pixel_auroc)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>10}",
            "class mean",
            "",
            pct(self.class_mean_image_auroc()),
            pct(self.class_mean_pixel_auroc())
        );
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>10} {:>10}",
            "all records",
            self.records,
            pct(Some(self.image_auroc)),
            pct(Some(self.pixel_auroc))
        );
        s
    }

    /// One `metric=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(s, "records={}", self.records);
        let _ = writeln!(s, "image_auroc={:.6}", self.image_auroc);
        let _ = writeln!(s, "pixel_auroc={:.6}", self.pixel_auroc);
        let _ = writeln!(s, "class_mean_image_auroc={}", opt(self.class_mean_image_auroc()));
        let _ = writeln!(s, "class_mean_pixel_auroc={}", opt(self.class_mean_pixel_auroc()));
        for c in &self.per_class {
            let _ = writeln!(s, "{}.records={}", c.class, c.records);
            let _ = writeln!(s, "{}.image_auroc={}", c.class, opt(c.image_auroc));
            let _ = writeln!(s, "{}.pixel_auroc={}", c.class, opt(c.pixel_auroc));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub final_loss: f32,
    pub report: EvalReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:>10} {:>10} {:>12}", "variant", "image", "pixel", "final loss");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<16} {:>10.1} {:>10.1} {:>12.6}",
            r.variant.as_str(),
            100.0 * r.report.image_auroc,
            100.0 * r.report.pixel_auroc,
            r.final_loss
        );
    }
    s
}

/// Writes `map` as an 8-bit binary PGM, min-max normalised, with the bounds
/// in `<path>.bounds.txt`. Returns `(min, max)`.
pub fn write_pgm(map: &ScoreMap, path: &Path) -> Result<(f64, f64)> {
    let (lo, hi) = map.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    bytes.extend(map.values.iter().map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| EvalError::Io { path: p, source }
    };
    std::fs::write(path, bytes).map_err(io(path))?;
    let mut side = path.as_os_str().to_owned();
    side.push(".bounds.txt");
    let side = std::path::PathBuf::from(side);
    std::fs::write(&side, format!("min={lo:.9e}\nmax={hi:.9e}\n")).map_err(io(&side))?;
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            records: 4,
            image_auroc: 0.75,
            pixel_auroc: 0.5,
            per_class: vec![
                ClassMetrics {
                    class: "a".into(),
                    records: 2,
                    image_auroc: Some(1.0),
                    pixel_auroc: Some(0.5),
                },
                ClassMetrics {
                    class: "b".into(),
                    records: 2,
                    image_auroc: None,
                    pixel_auroc: Some(0.7),
                },
            ],
        }
    }

    #[test]
    fn key_values_list_every_metric() {
        let kv = report().to_key_values();
        assert!(kv.contains("image_auroc=0.750000\n"));
        assert!(kv.contains("class_mean_image_auroc=1.000000\n"));
        assert!(kv.contains("class_mean_pixel_auroc=0.600000\n"));
        assert!(kv.contains("b.image_auroc=nan\n"));
        assert!(kv.lines().all(|l| l.split_once('=').is_some()));
    }

    #[test]
    fn pgm_is_normalised_with_bounds_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.pgm");
        let map = ScoreMap {
            height: 1,
            width: 3,
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(write_pgm(&map, &path).unwrap(), (1.0, 3.0));
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
        let side = std::fs::read_to_string(dir.path().join("s.pgm.bounds.txt")).unwrap();
        assert!(side.starts_with("min=1.0"));
    }
}
