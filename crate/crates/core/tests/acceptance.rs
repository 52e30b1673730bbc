//! Acceptance criteria of the pipeline, one test per criterion. Every test
//! prints a `criterion N: PASS|FAIL` line to the real stdout, so the verdicts
//! show up even when the harness captures output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use excel_core::dataset::load_dataset;
use excel_core::dynamic_calibration::{
    diversity_loss_gradient, dynamic_relation, AdapterConfig, AdapterParams, AffinityBatch,
};
use excel_core::encoder::{encode, load_weights, AttentionPolicy, DEFAULT_IC_WEIGHTS, DEPTH};
use excel_core::evaluation::evaluate;
use excel_core::fixtures::{generate_fixtures, random_encoder, EncoderFixture, FixturePaths, FixtureSpec};
use excel_core::netpbm::GrayImage;
use excel_core::numerics::softmax_rows;
use excel_core::pipeline::{Pipeline, PipelineConfig, RunSummary};
use excel_core::static_calibration::{PseudoLabelMap, StaticConfig, IGNORE};
use excel_core::store::blob_path_for;
use excel_core::text_enrichment::{
    build_explicit_bank, build_text_bank, enrich, hunt_attributes, ingest_knowledge, kmeans, BankConfig,
};
use excel_core::training::{dataset_losses, prepare_samples, score_maps, static_maps, TrainState};
use excel_core::{Rng, Tensor};

const ROW_SUM_TOL: f64 = 1e-5;
const ATTENTION_BUDGET: Duration = Duration::from_secs(30);
const FD_EPS: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;
/// Relative errors are taken against `max(|a|, |n|, FD_FLOOR·max|a|)`, so
/// entries that are zero up to round-off do not divide by zero.
const FD_FLOOR: f64 = 1e-3;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const KMEANS_MONOTONE_SLACK: f64 = 1e-9;
const CENTROID_TOL: f64 = 1e-5;
const CLUSTERING_SLACK: f64 = 0.02;
const STATIC_MARGIN: f64 = 0.05;
const RUN_BUDGET: Duration = Duration::from_secs(600);
const TOY_SEED: u64 = 42;

static SERIAL: Mutex<()> = Mutex::new(());

/// Criteria run one at a time so wall-clock budgets measure a single core.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {criterion}: {verdict}  {detail}");
    let _ = out.flush();
}

fn toy_fixtures(root: &Path) -> FixturePaths {
    generate_fixtures(root, &FixtureSpec::default(), TOY_SEED).expect("toy fixtures")
}

fn random_image(rng: &mut Rng, fixture: &EncoderFixture) -> Tensor {
    let (h, w) = (fixture.grid.0 * fixture.patch_size, fixture.grid.1 * fixture.patch_size);
    Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
}

#[test]
fn criterion_1_attention_rows_sum_to_declared_constant() {
    let _guard = serial();
    let start = Instant::now();
    let fixture = EncoderFixture::default();
    let weights = random_encoder(&fixture, &mut Rng::new(1));
    let mut rng = Rng::new(2);
    let hw = fixture.grid.0 * fixture.grid.1;
    let mut worst = 0.0f64;
    let mut rows = 0usize;
    for _ in 0..20 {
        let image = random_image(&mut rng, &fixture);
        let fd = Tensor::new(vec![16, hw], rng.gaussian_vec(16 * hw, 1.0)).unwrap();
        let relation = dynamic_relation(&fd, 3.0, 1.0).unwrap().masked;
        let policies = [
            AttentionPolicy::VanillaQK,
            AttentionPolicy::ValueValueLast,
            AttentionPolicy::intra(5),
            AttentionPolicy::IntraCorrelationBiased {
                layers: 5,
                weights: DEFAULT_IC_WEIGHTS,
                relation,
            },
        ];
        for policy in &policies {
            let trace = encode(&image, &weights, policy).unwrap();
            for (l, layer) in trace.layers.iter().enumerate() {
                let expected = policy.row_sum_at(l, DEPTH);
                for head in &layer.attention {
                    for r in 0..head.rows() {
                        let sum: f64 = head.row(r).iter().map(|&v| v as f64).sum();
                        worst = worst.max((sum - expected).abs());
                        rows += 1;
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= ROW_SUM_TOL && elapsed < ATTENTION_BUDGET;
    report(
        1,
        pass,
        &format!("{rows} rows, max |sum - constant| {worst:.2e} (tol {ROW_SUM_TOL:.0e}), {elapsed:.2?} (budget {ATTENTION_BUDGET:?})"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_masked_relations_vanish_under_softmax() {
    let _guard = serial();
    let mut rng = Rng::new(3);
    let mut masked_entries = 0usize;
    let mut nonzero_masked = 0usize;
    let mut infinite_diagonal = 0usize;
    for m in 0..100 {
        let n = 4 + rng.below(30);
        let d = 2 + rng.below(12);
        let beta = if m % 10 == 0 { 1.0 } else { rng.uniform() as f32 };
        let alpha = rng.uniform_range(0.1, 5.0) as f32;
        let fd = Tensor::new(vec![d, n], rng.gaussian_vec(d * n, 1.0)).unwrap();
        let rel = dynamic_relation(&fd, alpha, beta).unwrap();
        let probs = softmax_rows(&rel.masked).unwrap();
        for i in 0..n {
            if !rel.masked.at(i, i).is_finite() {
                infinite_diagonal += 1;
            }
            for j in 0..n {
                if rel.raw.at(i, j) < 0.0 {
                    masked_entries += 1;
                    if probs.at(i, j) != 0.0 {
                        nonzero_masked += 1;
                    }
                }
            }
        }
    }
    let pass = nonzero_masked == 0 && infinite_diagonal == 0 && masked_entries > 0;
    report(
        2,
        pass,
        &format!("{masked_entries} negative relations, {nonzero_masked} with nonzero softmax, {infinite_diagonal} infinite diagonal entries"),
    );
    assert!(pass);
}

/// Diversity loss straight from its definition, in f64, for a 1x1 fusion.
fn oracle_loss(
    feats: &[Tensor],
    config: &AdapterConfig,
    dw: &[Vec<f64>],
    db: &[Vec<f64>],
    fw: &[f64],
    fb: &[f64],
    batch: &AffinityBatch,
) -> f64 {
    let n = feats[0].cols();
    let d = feats[0].rows();
    let p = config.d_proj;
    let mut x = vec![vec![0.0f64; n]; DEPTH * p];
    for l in 0..DEPTH {
        for o in 0..p {
            for t in 0..n {
                let mut acc = db[l][o];
                for i in 0..d {
                    acc += dw[l][o * d + i] * feats[l].at(i, t) as f64;
                }
                x[l * p + o][t] = acc;
            }
        }
    }
    let fan = DEPTH * p;
    let fd: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            (0..config.d_out)
                .map(|o| fb[o] + (0..fan).map(|c| fw[o * fan + c] * x[c][t]).sum::<f64>())
                .collect()
        })
        .collect();
    let cos = |i: usize, j: usize| {
        let dot: f64 = fd[i].iter().zip(&fd[j]).map(|(a, b)| a * b).sum();
        let ni: f64 = fd[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nj: f64 = fd[j].iter().map(|a| a * a).sum::<f64>().sqrt();
        dot / (ni * nj)
    };
    let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
    let mut loss = 0.0;
    if !batch.positives.is_empty() {
        let s: f64 = batch
            .positives
            .iter()
            .map(|&(i, j)| 1.0 - sigmoid(cos(i as usize, j as usize)))
            .sum();
        loss += s / batch.positives.len() as f64;
    }
    if !batch.negatives.is_empty() {
        let s: f64 = batch
            .negatives
            .iter()
            .map(|&(i, j)| sigmoid(cos(i as usize, j as usize)))
            .sum();
        loss += s / batch.negatives.len() as f64;
    }
    loss
}

fn gradient_check(seed: u64) -> f64 {
    let fixture = EncoderFixture {
        dim: 8,
        heads: 2,
        patch_size: 2,
        grid: (3, 3),
        mlp_dim: 16,
        ..EncoderFixture::default()
    };
    let weights = random_encoder(&fixture, &mut Rng::new(seed));
    let mut rng = Rng::new(seed ^ 0x5eed);
    let image = random_image(&mut rng, &fixture);
    let trace = encode(&image, &weights, &AttentionPolicy::VanillaQK).unwrap();
    let feats: Vec<Tensor> = (0..DEPTH).map(|l| trace.patch_tokens(l)).collect();

    let config = AdapterConfig {
        d_proj: 4,
        d_out: 6,
        kernel: 1,
        ..AdapterConfig::default()
    };
    let (d, p, fan) = (fixture.dim, config.d_proj, DEPTH * config.d_proj);
    let unit = |rng: &mut Rng, shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, rng.gaussian_vec(n, 1.0)).unwrap()
    };
    let params = AdapterParams {
        config,
        dim: d,
        delta_w: (0..DEPTH).map(|_| unit(&mut rng, vec![p, d])).collect(),
        delta_b: (0..DEPTH).map(|_| unit(&mut rng, vec![p])).collect(),
        fusion_w: unit(&mut rng, vec![config.d_out, fan]),
        fusion_b: unit(&mut rng, vec![config.d_out]),
    };
    let labels: Vec<u8> = (0..9).map(|_| [0u8, 1, 2, IGNORE][rng.below(4)]).collect();
    let mut batch = AffinityBatch::from_labels(&PseudoLabelMap { grid: (3, 3), labels }, None, &mut rng);
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        let labels = vec![0, 0, 1, 1, 2, 2, 0, 1, 2];
        batch = AffinityBatch::from_labels(&PseudoLabelMap { grid: (3, 3), labels }, None, &mut rng);
    }
    let (_, grads) = diversity_loss_gradient(&trace, &params, &batch).unwrap();

    let f64s = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut dw: Vec<Vec<f64>> = params.delta_w.iter().map(f64s).collect();
    let mut db: Vec<Vec<f64>> = params.delta_b.iter().map(f64s).collect();
    let mut fw = f64s(&params.fusion_w);
    let mut fb = f64s(&params.fusion_b);

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    macro_rules! probe {
        ($slot:expr, $analytic:expr) => {
            for i in 0..$slot.len() {
                let keep = $slot[i];
                $slot[i] = keep + FD_EPS;
                let up = oracle_loss(&feats, &config, &dw, &db, &fw, &fb, &batch);
                $slot[i] = keep - FD_EPS;
                let down = oracle_loss(&feats, &config, &dw, &db, &fw, &fb, &batch);
                $slot[i] = keep;
                pairs.push(($analytic[i], (up - down) / (2.0 * FD_EPS)));
            }
        };
    }
    for l in 0..DEPTH {
        probe!(dw[l], grads.delta_w[l]);
        probe!(db[l], grads.delta_b[l]);
    }
    probe!(fw, grads.fusion_w);
    probe!(fb, grads.fusion_b);

    let floor = FD_FLOOR * pairs.iter().fold(0.0f64, |m, (a, _)| m.max(a.abs()));
    pairs
        .iter()
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_3_diversity_gradient_matches_finite_differences() {
    let _guard = serial();
    let start = Instant::now();
    let worst = (0..20).map(gradient_check).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = worst < FD_TOL && elapsed < GRADIENT_BUDGET;
    report(
        3,
        pass,
        &format!("20 seeds, max relative error {worst:.2e} (tol {FD_TOL:.0e}, eps {FD_EPS:.0e}), {elapsed:.2?} (budget {GRADIENT_BUDGET:?})"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_kmeans_oracles() {
    let _guard = serial();
    let mut rng = Rng::new(4);
    let mut rises = 0usize;
    let mut worst_centroid = 0.0f64;
    for _ in 0..50 {
        let d = 2 + rng.below(10);
        let n = 10 + rng.below(60);
        let k = 2 + rng.below(6);
        let points = Tensor::new(vec![d, n], rng.gaussian_vec(d * n, 1.0)).unwrap();
        let space = kmeans(&points, k, &mut rng, 100).unwrap();
        rises += space
            .history
            .windows(2)
            .filter(|w| w[1] > w[0] + KMEANS_MONOTONE_SLACK * w[0].abs())
            .count();
        for c in 0..space.count() {
            let members = space.members(c);
            for r in 0..d {
                let mean = members.iter().map(|&i| points.at(r, i) as f64).sum::<f64>() / members.len() as f64;
                worst_centroid = worst_centroid.max((mean - space.raw_centroids.at(r, c) as f64).abs());
            }
        }
    }

    // four blobs in 8 dimensions, 12 points each, far apart relative to spread
    let (d, blobs, per) = (8, 4, 12);
    let centres: Vec<Vec<f64>> = (0..blobs)
        .map(|b| (0..d).map(|r| if r % blobs == b { 20.0 } else { 0.0 }).collect())
        .collect();
    let truth: Vec<usize> = (0..blobs * per).map(|i| i / per).collect();
    let mut data = vec![0.0f32; d * truth.len()];
    for (i, &b) in truth.iter().enumerate() {
        for r in 0..d {
            data[r * truth.len() + i] = (centres[b][r] + rng.uniform_range(-1.0, 1.0)) as f32;
        }
    }
    let points = Tensor::new(vec![d, truth.len()], data).unwrap();
    let space = kmeans(&points, blobs, &mut rng, 100).unwrap();
    // brute force: every point's nearest blob mean is its own blob
    let blob_means: Vec<Vec<f64>> = (0..blobs)
        .map(|b| {
            (0..d)
                .map(|r| (b * per..(b + 1) * per).map(|i| points.at(r, i) as f64).sum::<f64>() / per as f64)
                .collect()
        })
        .collect();
    let nearest_mean = |i: usize| {
        (0..blobs)
            .min_by(|&a, &b| {
                let da: f64 = (0..d).map(|r| (points.at(r, i) as f64 - blob_means[a][r]).powi(2)).sum();
                let db: f64 = (0..d).map(|r| (points.at(r, i) as f64 - blob_means[b][r]).powi(2)).sum();
                da.total_cmp(&db)
            })
            .unwrap()
    };
    let oracle_ok = (0..truth.len()).all(|i| nearest_mean(i) == truth[i]);
    let mut mapping = BTreeMap::new();
    let recovered = truth
        .iter()
        .zip(&space.assignment)
        .all(|(&t, &a)| *mapping.entry(a).or_insert(t) == t)
        && mapping.len() == blobs;

    let pass = rises == 0 && worst_centroid <= CENTROID_TOL && oracle_ok && recovered;
    report(
        4,
        pass,
        &format!(
            "50 runs, {rises} objective increases; max |centroid - member mean| {worst_centroid:.2e} (tol {CENTROID_TOL:.0e}); blobs recovered: {recovered}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_text_enrichment_identities() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let paths = toy_fixtures(dir.path());
    let kb = ingest_knowledge(&paths.knowledge).unwrap();

    let bank = build_text_bank(&kb, 16, 8, 0.0, &mut Rng::new(5), 100).unwrap();
    let identity = (0..kb.classes())
        .all(|c| bank.enriched_of(c).iter().zip(kb.template_of(c)).all(|(a, b)| a.to_bits() == b.to_bits()));
    let mut rng = Rng::new(6);
    let mut identity_random = true;
    let mut order_violations = 0usize;
    for _ in 0..1000 {
        let d = 2 + rng.below(16);
        let b = 1 + rng.below(40);
        let k = 1 + rng.below(b);
        let attrs = Tensor::new(vec![d, b], rng.gaussian_vec(d * b, 1.0)).unwrap();
        let t = rng.gaussian_vec(d, 1.0);
        let chosen = hunt_attributes(&t, &attrs, k).unwrap();
        let score = |j: usize| (0..d).map(|r| t[r] as f64 * attrs.at(r, j) as f64).sum::<f64>();
        let selected: Vec<usize> = chosen.iter().map(|nb| nb.index).collect();
        let min_sel = selected.iter().map(|&j| score(j)).fold(f64::INFINITY, f64::min);
        let max_rest = (0..b)
            .filter(|j| !selected.contains(j))
            .map(score)
            .fold(f64::NEG_INFINITY, f64::max);
        if selected.len() != k || min_sel < max_rest {
            order_violations += 1;
        }
        let same = enrich(&t, &chosen, &attrs, 0.0).unwrap();
        identity_random &= same.iter().zip(&t).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let weights = load_weights(&paths.weights).unwrap();
    let dataset = load_dataset(&paths.dataset).unwrap();
    let static_cfg = StaticConfig::default();
    let miou_with = |bank| {
        let samples = prepare_samples(&dataset, &weights, &bank, &static_cfg).unwrap();
        score_maps(&static_maps(&samples), &dataset).unwrap().miou
    };
    let config = BankConfig::default();
    let clustered = miou_with(
        build_text_bank(
            &kb,
            16,
            config.topk,
            config.lambda,
            &mut Rng::new(TOY_SEED).fork(1),
            config.kmeans_iters,
        )
        .unwrap(),
    );
    let explicit = miou_with(build_explicit_bank(&kb, config.lambda).unwrap());

    let pass = identity && identity_random && order_violations == 0 && clustered >= explicit - CLUSTERING_SLACK;
    report(
        5,
        pass,
        &format!(
            "lambda=0 identity: {}; top-K order violations {order_violations}/1000; static mIoU B=16 {clustered:.4} vs no clustering {explicit:.4} (slack {CLUSTERING_SLACK})",
            identity && identity_random
        ),
    );
    assert!(pass);
}

struct ToyRuns {
    root: PathBuf,
    paths: FixturePaths,
    first: RunSummary,
    first_out: PathBuf,
    second_out: PathBuf,
    elapsed: Duration,
    backbone_before: Vec<u8>,
}

fn backbone_bytes(paths: &FixturePaths) -> Vec<u8> {
    let mut bytes = fs::read(&paths.weights).unwrap();
    bytes.extend(fs::read(blob_path_for(&paths.weights)).unwrap());
    bytes
}

/// Two full runs of the default pipeline on the toy set, computed once.
fn toy_runs() -> &'static ToyRuns {
    static RUNS: OnceLock<ToyRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_toy");
        if root.exists() {
            fs::remove_dir_all(&root).unwrap();
        }
        let paths = toy_fixtures(&root);
        let backbone_before = backbone_bytes(&paths);
        let config = PipelineConfig::for_fixtures(TOY_SEED);
        let first_out = root.join("run_a");
        let second_out = root.join("run_b");
        let start = Instant::now();
        let first = Pipeline::new(config.clone(), &root, Some(&first_out)).unwrap().run().unwrap();
        let elapsed = start.elapsed();
        Pipeline::new(config, &root, Some(&second_out)).unwrap().run().unwrap();
        ToyRuns {
            root,
            paths,
            first,
            first_out,
            second_out,
            elapsed,
            backbone_before,
        }
    })
}

#[test]
fn criterion_6_trained_beats_static_beats_vanilla() {
    let _guard = serial();
    let runs = toy_runs();
    let s = &runs.first;
    let dynamic = s.dynamic_miou.expect("full run reports dynamic mIoU");
    let pass = dynamic >= s.static_miou && s.static_miou >= s.vanilla_miou + STATIC_MARGIN && runs.elapsed < RUN_BUDGET;
    report(
        6,
        pass,
        &format!(
            "CAM mIoU vanilla {:.4}, static {:.4} (needs >= vanilla + {STATIC_MARGIN}), dynamic after 500 iterations {dynamic:.4} (needs >= static); full run {:.1?} (budget {RUN_BUDGET:?})",
            s.vanilla_miou, s.static_miou, runs.elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_loss_descends_and_backbone_is_frozen() {
    let _guard = serial();
    let runs = toy_runs();
    let weights = load_weights(&runs.paths.weights).unwrap();
    let dataset = load_dataset(&runs.paths.dataset).unwrap();
    let train_dir = runs.first_out.join("train");
    let (start, config) = TrainState::load(&train_dir.join("ckpt_000000.json")).unwrap();
    let (end, _) = TrainState::load(&train_dir.join(format!("ckpt_{:06}.json", config.iterations))).unwrap();
    let bank = excel_core::text_enrichment::TextRepresentation::load(&runs.first_out.join("attributes/bank.json")).unwrap();
    let samples = prepare_samples(&dataset, &weights, &bank, &config.static_cam).unwrap();
    let before = dataset_losses(&samples, &weights, &bank, &config, &start).unwrap();
    let after = dataset_losses(&samples, &weights, &bank, &config, &end).unwrap();
    let frozen = backbone_bytes(&runs.paths) == runs.backbone_before;
    let pass = after.total < before.total && frozen && end.iteration == 500 && config.gamma == 0.1;
    report(
        7,
        pass,
        &format!(
            "toy-set total loss (gamma {}) iteration 0 {:.6} -> iteration {} {:.6}; backbone bytes unchanged: {frozen}",
            config.gamma, before.total, end.iteration, after.total
        ),
    );
    assert!(pass);
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn criterion_8_runs_are_byte_identical() {
    let _guard = serial();
    let runs = toy_runs();
    let a = tree(&runs.first_out);
    let b = tree(&runs.second_out);
    let differing: Vec<&PathBuf> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let pass = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    report(
        8,
        pass,
        &format!(
            "{} vs {} files under {}, {} differ",
            a.len(),
            b.len(),
            runs.root.display(),
            differing.len()
        ),
    );
    assert!(pass, "differing files: {differing:?}");
}

#[test]
fn criterion_9_metric_oracles() {
    let _guard = serial();
    let names = vec!["square".to_string()];
    // ground truth covers columns 0..8, the prediction columns 4..12 of a
    // 16x4 image: overlap 4·4, union 12·4
    let (w, h) = (16, 4);
    let mut gt = GrayImage::new(w, h);
    let mut pred = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..8 {
            gt.put(x, y, 1);
        }
        for x in 4..12 {
            pred.put(x, y, 1);
        }
    }
    let overlap = evaluate(&[pred], &[gt.clone()], &names).unwrap();
    let iou = overlap.per_class.iter().find(|s| s.label == 1).map(|s| s.iou);
    let identical = evaluate(&[gt.clone()], &[gt], &names).unwrap();
    let pass = iou == Some(1.0 / 3.0) && identical.miou == 1.0;
    report(
        9,
        pass,
        &format!("half-overlap IoU {iou:?} (expected exactly 1/3), pred == gt mIoU {}", identical.miou),
    );
    assert!(pass);
}
