//! Benchmark error metrics (MAE, RMSE in millimetres; iMAE, iRMSE in 1/km)
//! and colour-mapped error images.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub imae: f64,
    pub irmse: f64,
    pub count: usize,
}

/// Evaluate over pixels that are marked valid and whose ground truth lies in
/// `range` (metres, inclusive).
pub fn evaluate(pred: &Tensor, gt: &Tensor, valid: Option<&[bool]>, range: (f64, f64)) -> Result<MetricSet> {
    pred.ensure_shape(gt, "prediction vs ground truth")?;
    if let Some(v) = valid {
        if v.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("mask has {} entries for {} pixels", v.len(), gt.len())));
        }
    }
    let (mut abs, mut sq, mut iabs, mut isq, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if valid.is_some_and(|v| !v[i]) || g < range.0 || g > range.1 || !(g > 0.0) {
            continue;
        }
        let e = (p - g) * 1000.0;
        abs += e.abs();
        sq += e * e;
        let ie = (1.0 / p - 1.0 / g) * 1000.0;
        iabs += ie.abs();
        isq += ie * ie;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidInput("no valid pixels to evaluate".into()));
    }
    let nf = n as f64;
    Ok(MetricSet {
        mae: abs / nf,
        rmse: (sq / nf).sqrt(),
        imae: iabs / nf,
        irmse: (isq / nf).sqrt(),
        count: n,
    })
}

/// Pixel-weighted combination of per-frame metrics.
pub fn aggregate(sets: &[MetricSet]) -> Result<MetricSet> {
    let n: usize = sets.iter().map(|s| s.count).sum();
    if n == 0 {
        return Err(Error::InvalidInput("nothing to aggregate".into()));
    }
    let nf = n as f64;
    let w = |f: fn(&MetricSet) -> f64| sets.iter().map(|s| f(s) * s.count as f64).sum::<f64>() / nf;
    let wsq = |f: fn(&MetricSet) -> f64| (sets.iter().map(|s| f(s).powi(2) * s.count as f64).sum::<f64>() / nf).sqrt();
    Ok(MetricSet {
        mae: w(|s| s.mae),
        rmse: wsq(|s| s.rmse),
        imae: w(|s| s.imae),
        irmse: wsq(|s| s.irmse),
        count: n,
    })
}

/// Colour for a normalised error in `[0, 1]`: dark blue through cyan and
/// yellow to red.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let t = if t.is_nan() { 1.0 } else { t.clamp(0.0, 1.0) };
    let mut i = 0;
    while i + 2 < STOPS.len() && t > STOPS[i + 1].0 {
        i += 1;
    }
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let f = (t - t0) / (t1 - t0);
    let mix = |k: usize| ((c0[k] + f * (c1[k] - c0[k])) * 255.0).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Absolute error `|pred - gt|` mapped through [`colormap`] with `max_error`
/// metres as the top of the scale; invalid pixels are black.
pub fn error_map(pred: &Tensor, gt: &Tensor, valid: Option<&[bool]>, max_error: f64) -> Result<image::RgbImage> {
    pred.ensure_shape(gt, "prediction vs ground truth")?;
    if pred.channels() != 1 {
        return Err(Error::ShapeMismatch("error map expects single-channel depth".into()));
    }
    let (h, w) = (pred.height(), pred.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = if valid.is_some_and(|v| !v[i]) {
                [0, 0, 0]
            } else {
                colormap((pred.data()[i] - gt.data()[i]).abs() / max_error)
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    Ok(img)
}

pub fn save_error_map(path: &Path, pred: &Tensor, gt: &Tensor, valid: Option<&[bool]>, max_error: f64) -> Result<()> {
    error_map(pred, gt, valid, max_error)?.save(path)?;
    Ok(())
}

/// Depth mapped through [`colormap`] over `[0, max_depth]` metres; pixels
/// without depth (zero) are black.
pub fn depth_map(depth: &Tensor, max_depth: f64) -> Result<image::RgbImage> {
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch("depth map expects single-channel depth".into()));
    }
    let (h, w) = (depth.height(), depth.width());
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let d = depth.data()[y as usize * w + x as usize];
        image::Rgb(if d > 0.0 { colormap(d / max_depth) } else { [0, 0, 0] })
    }))
}

/// Named per-frame metrics plus their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub frames: Vec<(String, MetricSet)>,
    pub aggregate: MetricSet,
}

impl MetricsTable {
    pub fn new(frames: Vec<(String, MetricSet)>) -> Result<Self> {
        let sets: Vec<MetricSet> = frames.iter().map(|(_, m)| *m).collect();
        let aggregate = aggregate(&sets)?;
        Ok(Self { frames, aggregate })
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "frame,mae_mm,rmse_mm,imae_1km,irmse_1km,pixels")?;
        let rows = self.frames.iter().map(|(n, m)| (n.as_str(), m)).chain([("aggregate", &self.aggregate)]);
        for (name, m) in rows {
            writeln!(out, "{name},{:.6},{:.6},{:.6},{:.6},{}", m.mae, m.rmse, m.imae, m.irmse, m.count)?;
        }
        Ok(())
    }

    pub fn save(&self, csv: &Path, json: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv)?))?;
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two passes: gather the kept pixels, then apply each formula on its own.
    fn naive(pred: &[f64], gt: &[f64], valid: &[bool], range: (f64, f64)) -> MetricSet {
        let mut kept = Vec::new();
        for i in 0..gt.len() {
            if valid[i] && gt[i] >= range.0 && gt[i] <= range.1 {
                kept.push((pred[i], gt[i]));
            }
        }
        let n = kept.len() as f64;
        let mae = kept.iter().map(|(p, g)| (1000.0 * p - 1000.0 * g).abs()).sum::<f64>() / n;
        let rmse = (kept.iter().map(|(p, g)| (1000.0 * p - 1000.0 * g).powi(2)).sum::<f64>() / n).sqrt();
        let imae = kept.iter().map(|(p, g)| (1000.0 / p - 1000.0 / g).abs()).sum::<f64>() / n;
        let irmse = (kept.iter().map(|(p, g)| (1000.0 / p - 1000.0 / g).powi(2)).sum::<f64>() / n).sqrt();
        MetricSet {
            mae,
            rmse,
            imae,
            irmse,
            count: kept.len(),
        }
    }

    #[test]
    fn hand_computed_two_pixel_case() {
        let pred = Tensor::from_vec(1, 1, 2, vec![2.0, 4.0]).unwrap();
        let gt = Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let m = evaluate(&pred, &gt, None, (0.0, f64::INFINITY)).unwrap();
        assert_eq!(m.mae, 1500.0);
        assert_eq!(m.imae, 375.0);
        assert!((m.rmse - 2.5f64.sqrt() * 1000.0).abs() < 1e-9);
        assert!((m.irmse - ((0.25 + 0.0625) / 2.0f64).sqrt() * 1000.0).abs() < 1e-9);
        assert_eq!(evaluate(&gt, &gt, None, (0.0, 10.0)).unwrap(), MetricSet { count: 2, ..MetricSet::default() });
    }

    #[test]
    fn range_cap_and_empty_set() {
        let pred = Tensor::from_vec(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let gt = Tensor::from_vec(1, 1, 3, vec![1.5, 0.1, 7.0]).unwrap();
        let m = evaluate(&pred, &gt, None, (0.2, 5.0)).unwrap();
        assert_eq!(m.count, 1);
        assert_eq!(m.mae, 500.0);
        assert!(evaluate(&pred, &gt, Some(&[false, true, true]), (0.2, 5.0)).is_err());
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(1..200);
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..10.0)).collect();
            let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
            valid[0] = true;
            let p = Tensor::from_vec(1, 1, n, pred.clone()).unwrap();
            let g = Tensor::from_vec(1, 1, n, gt.clone()).unwrap();
            let range = (0.0, 100.0);
            let a = evaluate(&p, &g, Some(&valid), range).unwrap();
            let b = naive(&pred, &gt, &valid, range);
            assert_eq!(a.count, b.count);
            for (x, y) in [(a.mae, b.mae), (a.rmse, b.rmse), (a.imae, b.imae), (a.irmse, b.irmse)] {
                assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn error_map_colours() {
        let gt = Tensor::filled(1, 3, 4, 2.0);
        let flat = error_map(&gt, &gt, None, 1.0).unwrap();
        assert_eq!(flat.dimensions(), (4, 3));
        assert!(flat.pixels().all(|p| p.0 == colormap(0.0)));
        let mut bad = gt.clone();
        bad.set(0, 1, 2, 5.0);
        let mut valid = vec![true; 12];
        valid[0] = false;
        let img = error_map(&bad, &gt, Some(&valid), 1.0).unwrap();
        assert_eq!(img.get_pixel(2, 1).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        let hot = img.pixels().filter(|p| p.0 == [255, 0, 0]).count();
        assert_eq!(hot, 1);
    }

    #[test]
    fn depth_map_marks_holes_black() {
        let mut d = Tensor::filled(1, 2, 2, 4.0);
        d.set(0, 0, 1, 0.0);
        let img = depth_map(&d, 4.0).unwrap();
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0]);
    }

    #[test]
    fn csv_and_json_output() {
        let m = MetricSet {
            mae: 1.0,
            rmse: 2.0,
            imae: 3.0,
            irmse: 4.0,
            count: 10,
        };
        let table = MetricsTable::new(vec![("a".into(), m), ("b".into(), m)]).unwrap();
        assert_eq!(table.aggregate.count, 20);
        assert!((table.aggregate.rmse - 2.0).abs() < 1e-12);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("aggregate,1.000000"));
        let dir = tempfile::tempdir().unwrap();
        table.save(&dir.path().join("m.csv"), &dir.path().join("m.json")).unwrap();
        let back: MetricsTable = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back, table);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ordering_permutation_and_scaling(seed in 0u64..100_000, s in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..60);
            let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..8.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..8.0)).collect();
            let t = |v: &[f64]| Tensor::from_vec(1, 1, v.len(), v.to_vec()).unwrap();
            let range = (0.0, 1e9);
            let m = evaluate(&t(&pred), &t(&gt), None, range).unwrap();
            prop_assert!(m.rmse >= m.mae - 1e-9 && m.mae >= 0.0);
            prop_assert!(m.irmse >= m.imae - 1e-9 && m.imae >= 0.0);

            let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
            let r = evaluate(&t(&rev(&pred)), &t(&rev(&gt)), None, range).unwrap();
            prop_assert!((r.mae - m.mae).abs() < 1e-9 * m.mae.max(1.0));
            prop_assert!((r.irmse - m.irmse).abs() < 1e-9 * m.irmse.max(1.0));

            let sc = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
            let k = evaluate(&t(&sc(&pred)), &t(&sc(&gt)), None, range).unwrap();
            prop_assert!((k.mae - s * m.mae).abs() < 1e-9 * (s * m.mae).max(1.0));
            prop_assert!((k.rmse - s * m.rmse).abs() < 1e-9 * (s * m.rmse).max(1.0));
            prop_assert!((k.imae - m.imae / s).abs() < 1e-9 * (m.imae / s).max(1.0));
            prop_assert!((k.irmse - m.irmse / s).abs() < 1e-9 * (m.irmse / s).max(1.0));
        }
    }
}
