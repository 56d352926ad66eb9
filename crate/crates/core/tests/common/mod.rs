//! Independent oracles and invariant probes shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dpgcd::change::Cca;
use dpgcd::dataset::{load_split, write_synthetic, PriorFallback, Sample, Split};
use dpgcd::fusion::GateFusionLevel;
use dpgcd::metrics::F1Average;
use dpgcd::model::ModelConfig;
use dpgcd::report::emit_report;
use dpgcd::synthetic::SyntheticSceneConfig;
use dpgcd::train::{curve_to_csv, evaluate, save_checkpoint, train_toy, EvalOutput, NormStats, TrainConfig};
use dpgcd::{Graph, Mode, ParamStore, Prng, Result, Tensor};

pub fn randn(rng: &mut Prng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.normal())
}

// ----- selective scan --------------------------------------------------------

/// Recurrence written out state by state, with no shared code path.
pub fn naive_scan(x: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64], l: usize, d: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; l * d];
    for ch in 0..d {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let dt = delta[t * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                h[s] = (dt * a[ch * n + s]).exp() * h[s] + dt * b[t * n + s] * x[t * d + ch];
                acc += c[t * n + s] * h[s];
            }
            y[t * d + ch] = acc;
        }
    }
    y
}

/// Max abs deviation of `Graph::scan` from [`naive_scan`] on one random draw.
pub fn scan_deviation(seed: u64, l: usize, n: usize, d: usize) -> Result<f64> {
    let mut rng = Prng::new(seed);
    let x = randn(&mut rng, &[l, d], 1.0);
    let delta = Tensor::from_fn(&[l, d], |_| rng.uniform(0.01, 1.0));
    let a = Tensor::from_fn(&[d, n], |_| -rng.uniform(0.05, 3.0));
    let b = randn(&mut rng, &[l, n], 1.0);
    let c = randn(&mut rng, &[l, n], 1.0);
    let mut g = Graph::new(Mode::Train);
    let vs: Vec<_> = [&x, &delta, &a, &b, &c].iter().map(|t| g.constant((*t).clone())).collect();
    let y = g.scan(vs[0], vs[1], vs[2], vs[3], vs[4])?;
    let want = naive_scan(x.data(), delta.data(), a.data(), b.data(), c.data(), l, d, n);
    Ok(g.value(y).data().iter().zip(&want).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

// ----- metrics ---------------------------------------------------------------

/// Metrics computed by per-class pixel counting, following the textbook
/// definitions directly.
#[derive(Debug, Clone)]
pub struct BruteMetrics {
    pub iou: Vec<f64>,
    pub f1: Vec<f64>,
    pub miou_ch: f64,
    pub mf1: f64,
    pub mae: f64,
    pub rmse: f64,
    pub crmse: Option<f64>,
    pub crel: Option<f64>,
}

pub fn brute_metrics(pred: &[usize], gt: &[usize], hp: &[f64], hg: &[f64], k: usize) -> BruteMetrics {
    let mut iou = Vec::new();
    let mut f1 = Vec::new();
    for cls in 0..k {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for i in 0..pred.len() {
            match (pred[i] == cls, gt[i] == cls) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        if tp + fp + fneg == 0.0 {
            iou.push(1.0);
            f1.push(1.0);
        } else {
            iou.push(tp / (tp + fp + fneg));
            let (p, r) = (tp / (tp + fp), tp / (tp + fneg));
            f1.push(if tp == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
        }
    }
    let miou_ch = iou[1..].iter().sum::<f64>() / (k - 1) as f64;
    let mf1 = f1.iter().sum::<f64>() / k as f64;
    let n = hp.len() as f64;
    let mae = hp.iter().zip(hg).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let rmse = (hp.iter().zip(hg).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n).sqrt();
    let changed: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != 0).collect();
    let crmse = (!changed.is_empty())
        .then(|| (changed.iter().map(|&i| (hp[i] - hg[i]).powi(2)).sum::<f64>() / changed.len() as f64).sqrt());
    let rel: Vec<f64> = changed
        .iter()
        .filter(|&&i| hg[i].abs() >= 1e-6)
        .map(|&i| (hp[i] - hg[i]).abs() / hg[i].abs())
        .collect();
    let crel = (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64);
    BruteMetrics {
        iou,
        f1,
        miou_ch,
        mf1,
        mae,
        rmse,
        crmse,
        crel,
    }
}

/// Random `side×side` label and height maps with blocky regions so every
/// class tends to appear.
pub fn random_maps(seed: u64, side: usize, k: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut rng = Prng::new(seed);
    let n = side * side;
    let gt: Vec<usize> = (0..n).map(|_| if rng.bernoulli(0.6) { 0 } else { rng.range(0, k - 1) }).collect();
    let pred: Vec<usize> = gt.iter().map(|&g| if rng.bernoulli(0.3) { rng.range(0, k - 1) } else { g }).collect();
    let hg: Vec<f64> = gt
        .iter()
        .map(|&g| match g {
            0 => 0.0,
            1 => rng.uniform(2.0, 20.0),
            _ => -rng.uniform(2.0, 20.0),
        })
        .collect();
    let hp: Vec<f64> = hg.iter().map(|h| h + rng.normal() * 2.0).collect();
    (pred, gt, hp, hg)
}

/// Largest deviation between the library report and [`brute_metrics`].
pub fn metric_deviation(seed: u64) -> Result<f64> {
    use dpgcd::loss::ChangeMask;
    use dpgcd::metrics::{Confusion, HeightSums, MetricReport};
    let side = 32;
    let (pred, gt, hp, hg) = random_maps(seed, side, 3);
    let mut conf = Confusion::new(3);
    conf.add(&pred, &gt)?;
    let mut sums = HeightSums::default();
    let mask = ChangeMask::from_labels(&gt, side, side)?;
    sums.add(&Tensor::new(&[1, side, side], hp.clone())?, &Tensor::new(&[1, side, side], hg.clone())?, &mask)?;
    let r = MetricReport::new(conf, &sums, F1Average::AllClasses, 1)?;
    let b = brute_metrics(&pred, &gt, &hp, &hg, 3);
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    let mut dev: f64 = 0.0;
    for (s, (i, f)) in r.classes.iter().zip(b.iou.iter().zip(&b.f1)) {
        dev = dev.max((s.iou - i).abs()).max((s.f1 - f).abs());
    }
    dev = dev
        .max((r.miou_ch - b.miou_ch).abs())
        .max((r.mf1 - b.mf1).abs())
        .max((r.height.mae - b.mae).abs())
        .max((r.height.rmse - b.rmse).abs())
        .max(opt(r.height.crmse, b.crmse))
        .max(opt(r.height.crel, b.crel));
    Ok(dev)
}

// ----- algebraic invariants --------------------------------------------------

/// Extremes of the gate map over random inputs, including large ones.
pub fn gate_range(seed: u64) -> Result<(f64, f64)> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let lvl = GateFusionLevel::new(&mut store, "f", 4, &mut rng)?;
    let scale = 10f64.powf(rng.uniform(-2.0, 2.0));
    let mut g = Graph::new(Mode::Train);
    let img = g.constant(randn(&mut rng, &[4, 6, 6], scale));
    let edm = g.constant(randn(&mut rng, &[4, 6, 6], scale));
    let t = lvl.trace(&mut g, &store, img, edm)?;
    let m = g.value(t.gate).data();
    Ok(m.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))))
}

/// Fuses a fixed image level with zero depth features under several random
/// redraws of every gate-branch parameter; true when all outputs agree
/// bitwise.
pub fn zero_depth_neutral(seed: u64, draws: usize) -> Result<bool> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let lvl = GateFusionLevel::new(&mut store, "f", 4, &mut rng)?;
    if let Some(b) = lvl.transform_edm.bias {
        store.get_mut(b).value = Tensor::zeros(store.value(b).shape());
    }
    let img = randn(&mut rng, &[4, 8, 8], 1.0);
    let gate_ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(".gate.")).map(|(id, _)| id).collect();
    let mut first: Option<Tensor> = None;
    for _ in 0..draws {
        for &id in &gate_ids {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = randn(&mut rng, &shape, 1.0);
        }
        let mut g = Graph::new(Mode::Train);
        let i = g.constant(img.clone());
        let e = g.constant(Tensor::zeros(&[4, 8, 8]));
        let out = lvl.fuse_level(&mut g, &store, i, e)?;
        let v = g.value(out).clone();
        match &first {
            None => first = Some(v),
            Some(f) if !f.bitwise_eq(&v) => return Ok(false),
            _ => {}
        }
    }
    Ok(true)
}

/// `max |CCA(P·x) − P·CCA(x)|` for a random token permutation `P`.
pub fn cca_equivariance(seed: u64) -> Result<f64> {
    let mut rng = Prng::new(seed);
    let mut store = ParamStore::new();
    let (l, c) = (rng.range(4, 40), 8);
    let cca = Cca::new(&mut store, "cca", c, 2, &mut rng)?;
    let x = randn(&mut rng, &[l, c], 1.0);
    let mut perm: Vec<usize> = (0..l).collect();
    rng.shuffle(&mut perm);
    let xp = Tensor::from_fn(&[l, c], |i| x.data()[perm[i / c] * c + i % c]);
    let run = |t: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new(Mode::Train);
        let v = g.constant(t.clone());
        let y = cca.forward(&mut g, &store, v)?;
        Ok(g.value(y).clone())
    };
    let y = run(&x)?;
    let yp = run(&xp)?;
    Ok((0..l * c).map(|i| (yp.data()[i] - y.data()[perm[i / c] * c + i % c]).abs()).fold(0.0, f64::max))
}

/// `|grad_loss(pred + shift, gt) − grad_loss(pred, gt)|`.
pub fn grad_loss_shift(seed: u64, shift: f64) -> Result<f64> {
    let mut rng = Prng::new(seed);
    let (h, w) = (rng.range(2, 12), rng.range(2, 12));
    let pred = randn(&mut rng, &[1, h, w], 5.0);
    let gt = randn(&mut rng, &[1, h, w], 5.0);
    let mask: Vec<bool> = (0..h * w).map(|_| rng.bernoulli(0.5)).collect();
    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new(Mode::Train);
        let pv = g.constant(p.clone());
        let gv = g.constant(gt.clone());
        let l = g.grad_loss(pv, gv, &mask)?;
        g.value(l).item()
    };
    let base = eval(&pred)?;
    let shifted = eval(&pred.map(|v| v + shift))?;
    Ok((shifted - base).abs() / base.abs().max(1.0))
}

/// True when `derive_dsm_gt(t1, Δ) − t1` reproduces `Δ` bitwise, for
/// dyadic-quantized heights as stored by the data harness.
pub fn dsm_round_trip(seed: u64) -> Result<bool> {
    let mut rng = Prng::new(seed);
    let q = |v: f64| (v * 256.0).round() / 256.0;
    let t1 = Tensor::from_fn(&[1, 9, 7], |_| q(rng.uniform(0.0, 200.0)));
    let dh = Tensor::from_fn(&[1, 9, 7], |_| q(rng.uniform(-40.0, 40.0)));
    let t2 = dpgcd::loss::derive_dsm_gt(&t1, &dh)?;
    Ok(t2.zip_map(&t1, |a, b| a - b)?.bitwise_eq(&dh))
}

/// Max of `|softmax(x + c) − softmax(x)|` and `|Σ softmax − 1|` per row.
pub fn softmax_shift(seed: u64, shift: f64) -> Result<f64> {
    let mut rng = Prng::new(seed);
    let (r, c) = (rng.range(1, 6), rng.range(2, 9));
    let x = randn(&mut rng, &[r, c], 3.0);
    let eval = |t: &Tensor| -> Result<Tensor> {
        let mut g = Graph::new(Mode::Train);
        let v = g.constant(t.clone());
        let s = g.softmax(v)?;
        Ok(g.value(s).clone())
    };
    let a = eval(&x)?;
    let b = eval(&x.map(|v| v + shift))?;
    let row_err = a.data().chunks(c).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    Ok(a.max_abs_diff(&b).max(row_err))
}

// ----- end-to-end pipeline ---------------------------------------------------

/// Synthetic set of the end-to-end criteria: seed 42, 250 tiles of 64×64
/// split 200 train / 50 test.
pub fn acceptance_scene() -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        seed: 42,
        tiles: 250,
        tile_size: 64,
        splits: [0.8, 0.0, 0.2],
        ..SyntheticSceneConfig::default()
    }
}

pub struct PipelineRun {
    pub dir: PathBuf,
    pub curve_totals: Vec<f64>,
    pub eval: EvalOutput,
    pub test: Vec<Sample>,
}

impl PipelineRun {
    pub fn curve_bytes(&self) -> Vec<u8> {
        std::fs::read(self.dir.join("curve.csv")).unwrap_or_default()
    }

    pub fn report_bytes(&self) -> Vec<u8> {
        ["metrics.txt", "metrics.csv", "scatter.csv", "heights.csv", "kde.csv", "histogram.csv"]
            .iter()
            .flat_map(|f| std::fs::read(self.dir.join("eval").join(f)).unwrap_or_default())
            .collect()
    }
}

/// Writes the data set to disk, trains from the manifest, then evaluates
/// the test split into `dir/eval`.
pub fn run_pipeline(dir: &Path, data: &Path, model: &ModelConfig, steps: usize) -> Result<PipelineRun> {
    let manifest_path = data.join("manifest.tsv");
    if !manifest_path.exists() {
        write_synthetic(&acceptance_scene(), data)?;
    }
    let m = dpgcd::dataset::Manifest::load(&manifest_path)?;
    let k = model.decoder.num_classes;
    let train = load_split(&m, Split::Train, k, PriorFallback::None)?;
    let test = load_split(&m, Split::Test, k, PriorFallback::None)?;
    let tc = TrainConfig {
        steps,
        seed: 42,
        ..TrainConfig::default()
    };
    std::fs::create_dir_all(dir)?;
    let out = train_toy(&train, model, &tc, None, |_| {})?;
    std::fs::write(dir.join("curve.csv"), curve_to_csv(&out.curve))?;
    save_checkpoint(&dir.join("model.ckpt"), model, &out.store)?;
    let eval = evaluate(&out.model, &out.store, &test, F1Average::AllClasses, NormStats::Instance)?;
    emit_report(&eval, &dir.join("eval"))?;
    Ok(PipelineRun {
        dir: dir.to_path_buf(),
        curve_totals: out.curve.iter().map(|r| r.total).collect(),
        eval,
        test,
    })
}

/// Closed-form cRMSE of the all-unchanged, `Δh ≡ 0` predictor: the RMS of
/// `|ΔH|` over change pixels.
pub fn zero_predictor_crmse(samples: &[Sample]) -> Option<f64> {
    let (mut sq, mut n) = (0.0, 0usize);
    for s in samples {
        for (&l, &h) in s.targets.labels.iter().zip(s.targets.delta_h.data()) {
            if l != 0 {
                sq += h * h;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sq / n as f64).sqrt())
}
