mod common;

use std::path::Path;

use dpgcd::dataset::{
    ingest_depth_prior, load_sample, load_split, tile_manifest, write_synthetic, Manifest, PriorFallback, Sample,
    SampleRasters, Split,
};
use dpgcd::loss::LossConfig;
use dpgcd::metrics::F1Average;
use dpgcd::model::ModelConfig;
use dpgcd::raster::RasterFile;
use dpgcd::report::{emit_report, parse_scatter, rebuild_report};
use dpgcd::synthetic::{gen_synthetic, gen_tile, SyntheticSceneConfig};
use dpgcd::train::{
    checkpoint_bytes, checkpoint_from_bytes, curve_to_csv, load_checkpoint, oracle_predictions, score_predictions,
    train_toy, zero_predictions, TrainConfig,
};
use dpgcd::{Error, Tensor};

fn small_scene(tiles: usize) -> SyntheticSceneConfig {
    SyntheticSceneConfig {
        tile_size: 32,
        tiles,
        building_size: (4, 8),
        ..SyntheticSceneConfig::default()
    }
}

fn samples(cfg: &SyntheticSceneConfig) -> Vec<Sample> {
    gen_synthetic(cfg).unwrap().iter().map(|t| Sample::from_tile(t).unwrap()).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn synthetic_tiles_are_self_consistent() {
    for t in gen_synthetic(&small_scene(12)).unwrap() {
        let (t1, t2, dh) = (t.dsm_t1.data(), t.dsm_t2.data(), t.delta_h.data());
        for p in 0..t.labels.len() {
            assert_eq!(t2[p] - t1[p], dh[p]);
            assert_eq!(t.labels[p] != 0, dh[p].abs() > 0.0, "tile {} pixel {p}", t.index);
        }
        assert!(t.img_t2.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(spearman(t.depth_prior.data(), t2) > 0.9, "tile {}", t.index);
    }
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let cfg = small_scene(4);
    assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    assert_eq!(gen_tile(&cfg, 3).unwrap(), gen_synthetic(&cfg).unwrap()[3]);
    let other = SyntheticSceneConfig { seed: 7, ..cfg.clone() };
    assert_ne!(gen_tile(&other, 0).unwrap(), gen_tile(&cfg, 0).unwrap());
}

#[test]
fn no_change_probabilities_give_no_change() {
    let cfg = SyntheticSceneConfig {
        p_new: 0.0,
        p_demolish: 0.0,
        ..small_scene(6)
    };
    for t in gen_synthetic(&cfg).unwrap() {
        assert!(t.labels.iter().all(|&l| l == 0));
        assert!(t.delta_h.data().iter().all(|&h| h == 0.0));
    }
}

#[test]
fn written_samples_load_back_as_generated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scene(10);
    let m = write_synthetic(&cfg, dir.path()).unwrap();
    assert_eq!(m.entries.len(), 10);
    let (tr, va, te) = cfg.split_counts();
    assert_eq!((m.split(Split::Train).len(), m.split(Split::Val).len(), m.split(Split::Test).len()), (tr, va, te));
    let reloaded = Manifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(reloaded.entries, m.entries);
    let mem = samples(&cfg);
    let disk: Vec<Sample> = m.entries.iter().map(|e| load_sample(&m, e, 3, PriorFallback::None).unwrap()).collect();
    assert_eq!(disk, mem);
}

#[test]
fn missing_prior_fails_or_falls_back_to_the_proxy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scene(3);
    let m = write_synthetic(&cfg, dir.path()).unwrap();
    let e = &m.entries[0];
    let prior = m.resolve(&e.depth_prior);
    let stored = ingest_depth_prior(&prior, None).unwrap();
    std::fs::remove_file(&prior).unwrap();
    assert!(matches!(ingest_depth_prior(&prior, None), Err(Error::Data(_))));
    assert!(matches!(load_sample(&m, e, 3, PriorFallback::None), Err(Error::Data(_))));
    let proxy = PriorFallback::Proxy {
        gamma: cfg.prior_gamma,
        noise: cfg.prior_noise,
        seed: 1,
    };
    let s = load_sample(&m, e, 3, proxy).unwrap();
    assert_eq!(s.input.depth_prior.shape(), stored.shape());
    let t2 = s.targets.dsm_t2.data();
    assert!(spearman(s.input.depth_prior.data(), t2) > 0.9);
}

#[test]
fn tiling_counts_and_reassembly() {
    let dir = tempfile::tempdir().unwrap();
    let big = SyntheticSceneConfig {
        tile_size: 128,
        tiles: 1,
        splits: [1.0, 0.0, 0.0],
        ..SyntheticSceneConfig::default()
    };
    let m = write_synthetic(&big, &dir.path().join("src")).unwrap();
    let (tiled, trimmed) = tile_manifest(&m, 64, 64, &dir.path().join("t64")).unwrap();
    assert_eq!(tiled.entries.len(), 4);
    assert!(trimmed.is_empty());

    let e = &m.entries[0];
    let whole = RasterFile::read(&m.resolve(&e.img_t2)).unwrap();
    let mut rebuilt = whole.clone();
    for t in &tiled.entries {
        let (r, c) = {
            let tail = t.id.rsplit_once("_r").unwrap().1;
            let (r, c) = tail.split_once("_c").unwrap();
            (r.parse::<usize>().unwrap(), c.parse::<usize>().unwrap())
        };
        let piece = RasterFile::read(&tiled.resolve(&t.img_t2)).unwrap();
        assert_eq!(piece, whole.crop(r, c, 64, 64).unwrap());
        rebuilt = paste(rebuilt, &piece, r, c);
    }
    assert_eq!(rebuilt.to_bytes(), whole.to_bytes());

    // A 96-pixel source does not divide into 64-pixel tiles.
    let odd = SyntheticSceneConfig { tile_size: 96, ..big };
    let m = write_synthetic(&odd, &dir.path().join("odd")).unwrap();
    let (tiled, trimmed) = tile_manifest(&m, 64, 64, &dir.path().join("odd64")).unwrap();
    assert_eq!(tiled.entries.len(), 1);
    assert_eq!(trimmed, vec![m.entries[0].id.clone()]);
}

fn paste(mut dst: RasterFile, src: &RasterFile, row: usize, col: usize) -> RasterFile {
    let t = src.to_tensor();
    let mut d = dst.to_tensor();
    let (c, h, w) = t.dims3().unwrap();
    let (_, dh, dw) = d.dims3().unwrap();
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                d.data_mut()[k * dh * dw + (row + i) * dw + col + j] = t.data()[k * h * w + i * w + j];
            }
        }
    }
    dst = RasterFile::from_tensor(&d).unwrap();
    dst
}

fn short_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn short_training_is_deterministic() {
    let train = samples(&small_scene(3));
    let cfg = ModelConfig::default();
    let a = train_toy(&train, &cfg, &short_config(4), None, |_| {}).unwrap();
    let b = train_toy(&train, &cfg, &short_config(4), None, |_| {}).unwrap();
    assert_eq!(curve_to_csv(&a.curve), curve_to_csv(&b.curve));
    assert_eq!(checkpoint_bytes(&cfg, &a.store), checkpoint_bytes(&cfg, &b.store));
    assert!(a.curve.iter().all(|r| r.total.is_finite()));
}

#[test]
fn frozen_encoder_with_segmentation_loss_only_moves_the_rest() {
    let train = samples(&small_scene(2));
    let cfg = ModelConfig::default();
    let tc = TrainConfig {
        freeze_encoder: true,
        loss: LossConfig {
            lambda: [1.0, 0.0, 0.0, 0.0],
            ..LossConfig::default()
        },
        ..short_config(3)
    };
    let init = dpgcd::model::Model::init(cfg.clone(), tc.seed).unwrap().1;
    let out = train_toy(&train, &cfg, &tc, None, |_| {}).unwrap();
    let moved = |prefix: &str| {
        init.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .any(|(_, p)| out.store.by_name(&p.name).unwrap().value != p.value)
    };
    assert!(!moved("encoder."));
    assert!(!moved("decoder.head3d"));
    assert!(!moved("decoder.dsm"));
    assert!(moved("change."));
    assert!(moved("decoder.uper"));
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = samples(&small_scene(1));
    // Nodata in the inputs is normalized away; in the targets it poisons the loss.
    train[0].targets.delta_h.data_mut()[5] = f64::NAN;
    let last = dir.path().join("last_good.ckpt");
    let cfg = ModelConfig::default();
    let err = train_toy(&train, &cfg, &short_config(2), Some(&last), |_| {}).err().unwrap();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let (_, store) = load_checkpoint(&last, Some(&cfg)).unwrap();
    let init = dpgcd::model::Model::init(cfg.clone(), 3).unwrap().1;
    assert_eq!(checkpoint_bytes(&cfg, &store), checkpoint_bytes(&cfg, &init));
}

#[test]
fn divergent_learning_rate_aborts_with_finite_last_good_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let train = samples(&small_scene(2));
    let last = dir.path().join("last_good.ckpt");
    let cfg = ModelConfig::default();
    let tc = TrainConfig {
        lr: 1e12,
        ..short_config(40)
    };
    let mut steps = 0;
    let err = train_toy(&train, &cfg, &tc, Some(&last), |_| steps += 1).err().unwrap();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(steps < 40);
    let (_, store) = load_checkpoint(&last, Some(&cfg)).unwrap();
    assert!(store.iter().all(|(_, p)| p.value.is_finite()));
}

#[test]
fn checkpoint_round_trip_and_config_mismatch() {
    let cfg = ModelConfig::default();
    let (_, store) = dpgcd::model::Model::init(cfg.clone(), 9).unwrap();
    let bytes = checkpoint_bytes(&cfg, &store);
    let (_, back) = checkpoint_from_bytes(&bytes, Some(&cfg)).unwrap();
    assert_eq!(checkpoint_bytes(&cfg, &back), bytes);
    let other = ModelConfig { use_edp: false, ..cfg };
    assert!(matches!(checkpoint_from_bytes(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
    assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 1], None), Err(Error::Checkpoint(_))));
}

#[test]
fn ground_truth_scores_perfectly() {
    let s = samples(&small_scene(8));
    let ev = score_predictions(&s, &oracle_predictions(&s), 3, F1Average::AllClasses).unwrap();
    assert!(ev.report.classes.iter().all(|c| c.absent || c.iou == 1.0));
    assert_eq!(ev.report.miou_ch, 1.0);
    assert_eq!((ev.report.height.mae, ev.report.height.rmse), (0.0, 0.0));
    assert_eq!(ev.report.height.crmse, Some(0.0));
    assert!(ev.scatter.iter().all(|(g, p)| g == p));
}

#[test]
fn zero_predictor_matches_its_closed_form() {
    let s = samples(&small_scene(8));
    let ev = score_predictions(&s, &zero_predictions(&s), 3, F1Average::AllClasses).unwrap();
    let want = common::zero_predictor_crmse(&s).unwrap();
    let got = ev.report.height.crmse.unwrap();
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
    assert_eq!(ev.report.miou_ch, 0.0);
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn report_files_are_written_and_rebuildable() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(&small_scene(6));
    let ev = score_predictions(&s, &oracle_predictions(&s), 3, F1Average::AllClasses).unwrap();
    let out = dir.path().join("eval");
    emit_report(&ev, &out).unwrap();
    for f in ["metrics.txt", "metrics.csv", "scatter.csv", "heights.csv", "kde.csv", "histogram.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let scatter = parse_scatter(&read(&out, "scatter.csv")).unwrap();
    assert_eq!(scatter.len(), ev.scatter.len());
    assert!(scatter.iter().all(|(g, p)| g == p));
    let kde = read(&out, "kde.csv");
    std::fs::remove_file(out.join("kde.csv")).unwrap();
    assert_eq!(rebuild_report(&out).unwrap(), read(&out, "metrics.txt"));
    assert_eq!(read(&out, "kde.csv"), kde);

    let quiet = SyntheticSceneConfig {
        p_new: 0.0,
        p_demolish: 0.0,
        ..small_scene(2)
    };
    let s = samples(&quiet);
    let ev = score_predictions(&s, &zero_predictions(&s), 3, F1Average::AllClasses).unwrap();
    let empty = dir.path().join("empty");
    emit_report(&ev, &empty).unwrap();
    assert_eq!(read(&empty, "scatter.csv").lines().count(), 1);
    assert_eq!(ev.report.height.crmse, None);
}

#[test]
fn raster_files_round_trip_sample_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let t = gen_tile(&small_scene(1), 0).unwrap();
    let r = SampleRasters::from_tile(&t).unwrap();
    let e = r.write(dir.path(), "tile00000", Split::Train, 0.5).unwrap();
    let back = RasterFile::read(&dir.path().join(&e.img_t2)).unwrap().to_tensor();
    assert_eq!(back, t.img_t2);
    let dh: Tensor = RasterFile::read(&dir.path().join(&e.delta_h)).unwrap().to_tensor();
    assert_eq!(dh, t.delta_h);
    let m = Manifest {
        root: dir.path().to_path_buf(),
        entries: vec![e],
    };
    assert_eq!(load_split(&m, Split::Train, 3, PriorFallback::None).unwrap(), vec![Sample::from_tile(&t).unwrap()]);
}
