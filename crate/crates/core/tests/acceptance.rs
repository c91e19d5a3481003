//! One PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.
//!
//! Criteria 4 and 8 need the desk model. It is trained once into
//! `target/tmp/desk-<fingerprint>` and reused by later runs; a cold run takes
//! hours on one CPU core.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use jigwm::attacks::{pgd_attack, surrogate_attack, train_surrogate, AttackConfig, SurrogateConfig};
use jigwm::autograd::{Graph, Tensor};
use jigwm::desk::{self, DeskMetrics};
use jigwm::detect::{evaluate, roc_auc, tpr_at_fpr};
use jigwm::hav::{evaluate_hav, synthetic_groups, train_hav, HavConfig, HavTrainConfig};
use jigwm::image::Image;
use jigwm::jigsaw::{apply_shuffle, invert_shuffle, log2_factorial, new_key, random_key, JigsawKey};
use jigwm::losses::{
    ranknet_loss_var, ranknet_prob, ranknet_prob_var, visual_loss_var, watermark_loss, watermark_loss_var, FilterBankPerceptual,
    LossWeights,
};
use jigwm::model::{KeyMaps, Model};
use jigwm::perturb::AnalyticPerturber;
use jigwm::train::{autoclip_threshold, branch_scores, build_contrastive_batch, ContrastiveBatch, RunConfig, Trainer};
use jigwm::{synth, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn jigsaw_correctness() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = 0;
    let mut keys_ok = 0;
    for _ in 0..1000 {
        let grid = (rng.random_range(1..=5), rng.random_range(1..=5));
        let grid = if grid.0 * grid.1 < 2 { (2, grid.1) } else { grid };
        let (h, w) = (grid.0 * rng.random_range(1..=6), grid.1 * rng.random_range(1..=6));
        let img = Image::<f32>::from_fn(h, w, |_, _, _| rng.random());
        let key = random_key(grid, &mut rng)?;
        let back = invert_shuffle(&apply_shuffle(&img, &key)?, &key)?;
        exact += usize::from(back.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        keys_ok += usize::from(JigsawKey::from_json(&key.to_json())? == key);
    }
    let fact16: u64 = (1..=16).product();
    let bits = log2_factorial(16);
    let bits_ok = bits >= 44.0 && (bits - (fact16 as f64).log2()).abs() < 1e-9;
    let t = t0.elapsed();
    Ok(outcome(
        exact == 1000 && keys_ok == 1000 && bits_ok && t < Duration::from_secs(60),
        format!("{exact}/1000 bit-exact, {keys_ok}/1000 key round-trips, log2(16!) = {bits:.3}, {}", secs(t)),
    ))
}

/// Largest relative gap between tape gradients and five-point central
/// differences of `f` at `x` with step `h`, over the coordinates in `coords`.
fn fd_gap(x: &[f64], coords: &[usize], h: f64, f: &dyn Fn(&[f64]) -> f64, grad: &[f64]) -> f64 {
    let at = |i: usize, d: f64| {
        let mut v = x.to_vec();
        v[i] += d;
        f(&v)
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let fd = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2.0 * h) - at(i, -2.0 * h))) / (12.0 * h);
        let scale = fd.abs().max(grad[i].abs());
        let gap = if scale < 1e-8 { (fd - grad[i]).abs() } else { (fd - grad[i]).abs() / scale };
        worst = worst.max(gap);
    }
    worst
}

fn loss_oracles() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w0 = LossWeights::default();
    let at_margin = watermark_loss(&[w0.lambda], &[w0.lambda], &w0)?;
    let margin_ok = (at_margin - 2.0 * 2f64.ln()).abs() <= 1e-9;
    let mut worst = [0.0f64; 4];

    for _ in 0..100 {
        // Watermark loss in k₊ and k₋.
        let w = LossWeights { lambda: rng.random_range(0.2..0.8), tau: rng.random_range(0.05..0.5), ..w0 };
        let (np, nn) = (rng.random_range(1..6), rng.random_range(1..6));
        let x: Vec<f64> = (0..np + nn).map(|_| rng.random_range(-0.5..1.5)).collect();
        let f = |v: &[f64]| {
            let g = Graph::<f64>::new();
            let l = watermark_loss_var(g.constant(Tensor::new(&[np], v[..np].to_vec())), g.constant(Tensor::new(&[nn], v[np..].to_vec())), &w);
            l.value().item()
        };
        let g = Graph::<f64>::new();
        let (kp, kn) = (g.leaf(Tensor::new(&[np], x[..np].to_vec())), g.leaf(Tensor::new(&[nn], x[np..].to_vec())));
        let grads = g.backward(watermark_loss_var(kp, kn, &w));
        let grad: Vec<f64> = grads.get_or_zeros(kp).data().iter().chain(grads.get_or_zeros(kn).data()).copied().collect();
        worst[0] = worst[0].max(fd_gap(&x, &(0..np + nn).collect::<Vec<_>>(), 1e-3, &f, &grad));

        // Visual loss in the watermarked image.
        let w = LossWeights { alpha: rng.random_range(0.0..2.0), beta: rng.random_range(0.0..2.0), ..w0 };
        let m = FilterBankPerceptual::<f64>::new(2);
        let (h, wd) = (8, 8);
        let n = 3 * h * wd;
        let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.9)).collect();
        let xw: Vec<f64> = base.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        let f = |v: &[f64]| {
            let g = Graph::<f64>::new();
            let l = visual_loss_var(g.constant(Tensor::new(&[1, 3, h, wd], base.clone())), g.constant(Tensor::new(&[1, 3, h, wd], v.to_vec())), &w, &m);
            l.value().item()
        };
        let g = Graph::<f64>::new();
        let xv = g.leaf(Tensor::new(&[1, 3, h, wd], xw.clone()));
        let grads = g.backward(visual_loss_var(g.constant(Tensor::new(&[1, 3, h, wd], base.clone())), xv, &w, &m));
        let grad = grads.get_or_zeros(xv).data().to_vec();
        let coords: Vec<usize> = (0..12).map(|_| rng.random_range(0..n)).collect();
        worst[1] = worst[1].max(fd_gap(&xw, &coords, 1e-4, &f, &grad));

        // RankNet probability in both scores.
        let s = vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let f = |v: &[f64]| {
            let g = Graph::<f64>::new();
            ranknet_prob_var(g.constant(Tensor::scalar(v[0])), g.constant(Tensor::scalar(v[1]))).value().item()
        };
        let g = Graph::<f64>::new();
        let (a, b) = (g.leaf(Tensor::scalar(s[0])), g.leaf(Tensor::scalar(s[1])));
        let grads = g.backward(ranknet_prob_var(a, b));
        let grad = [grads.get_or_zeros(a).item(), grads.get_or_zeros(b).item()];
        worst[2] = worst[2].max(fd_gap(&s, &[0, 1], 1e-3, &f, &grad));

        // RankNet loss in the predicted probabilities.
        let k = rng.random_range(1..6);
        let y = Tensor::new(&[k], (0..k).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect());
        let p: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..0.99)).collect();
        let f = |v: &[f64]| {
            let g = Graph::<f64>::new();
            ranknet_loss_var(&y, g.constant(Tensor::new(&[k], v.to_vec()))).value().item()
        };
        let g = Graph::<f64>::new();
        let pv = g.leaf(Tensor::new(&[k], p.clone()));
        let grads = g.backward(ranknet_loss_var(&y, pv));
        worst[3] = worst[3].max(fd_gap(&p, &(0..k).collect::<Vec<_>>(), 1e-4, &f, grads.get_or_zeros(pv).data()));
    }
    let t = t0.elapsed();
    Ok(outcome(
        margin_ok && worst.iter().all(|&g| g <= 1e-4) && t < Duration::from_secs(60),
        format!(
            "L_w(λ, λ) − 2 ln 2 = {:.1e}; worst relative gradient gaps watermark {:.1e}, visual {:.1e}, ranknet prob {:.1e}, ranknet loss {:.1e}; {}",
            at_margin - 2.0 * 2f64.ln(),
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            secs(t)
        ),
    ))
}

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut twice = 0u64;
    for p in pos {
        for n in neg {
            twice += match p.partial_cmp(n).expect("no NaN") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / 2.0 / (pos.len() * neg.len()) as f64
}

/// Scans every observed score as a threshold, lowest first.
fn brute_tpr(pos: &[f64], neg: &[f64], fpr: f64) -> (f64, f64) {
    let mut cands: Vec<f64> = pos.iter().chain(neg).copied().collect();
    cands.sort_by(f64::total_cmp);
    let at_or_above = |set: &[f64], t: f64| set.iter().filter(|&&v| v >= t).count();
    let thr = cands
        .iter()
        .copied()
        .find(|&t| at_or_above(neg, t) as f64 / neg.len() as f64 <= fpr)
        .unwrap_or_else(|| cands.last().expect("nonempty").next_up());
    (at_or_above(pos, thr) as f64 / pos.len() as f64, thr)
}

fn metric_oracles() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agree = 0;
    for i in 0..200 {
        // Coarse grids force ties; fine ones avoid them.
        let levels = if i % 2 == 0 { 8.0 } else { 1e6 };
        let mut draw = |n: usize, shift: f64| -> Vec<f64> { (0..n).map(|_| ((rng.random::<f64>() + shift) * levels).round() / levels).collect() };
        let (np, nn) = (1 + i % 37, 1 + (i * 7) % 150);
        let pos = draw(np, 0.2);
        let neg = draw(nn, 0.0);
        let fpr = [0.0, 0.01, 0.05, 0.2, 1.0][i % 5];
        let same = roc_auc(&pos, &neg)? == brute_auc(&pos, &neg) && tpr_at_fpr(&pos, &neg, fpr)? == brute_tpr(&pos, &neg, fpr);
        agree += usize::from(same);
    }
    let t = t0.elapsed();
    Ok(outcome(agree == 200 && t < Duration::from_secs(60), format!("{agree}/200 score sets exact, {}", secs(t))))
}

#[derive(Deserialize)]
struct Baseline {
    fingerprint: String,
    train_seconds_this_invocation: u64,
    metrics: DeskMetrics,
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load_baseline() -> Option<Baseline> {
    let text = std::fs::read_to_string(repo_root().join("acceptance/desk_baseline.json")).ok()?;
    serde_json::from_str(&text).ok()
}

struct Desk {
    model: Model<f32>,
    metrics: DeskMetrics,
    baseline: Option<Baseline>,
    train_time: Duration,
}

fn desk_model() -> Result<Desk> {
    let cfg = RunConfig::desk();
    let fp = desk::fingerprint(&cfg);
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{fp}"));
    let t0 = Instant::now();
    let model = desk::train(&cfg, &dir, |_| Ok(()))?;
    let train_time = t0.elapsed();
    let metrics = desk::measure(&model, &desk::heldout_set(), &desk::eval_key(), cfg.train.epochs)?;
    let baseline = load_baseline().filter(|b| b.fingerprint == fp);
    Ok(Desk { model, metrics, baseline, train_time })
}

fn desk_training(d: &Desk) -> Outcome {
    let m = &d.metrics;
    let Some(b) = &d.baseline else {
        return outcome(false, "no baseline recorded for the current desk configuration");
    };
    // A cached model reports the recorded duration of the run that trained it.
    let hours = d.train_time.as_secs().max(b.train_seconds_this_invocation) as f64 / 3600.0;
    let reproduced = b.metrics == *m;
    let pass = m.clean_auc >= 0.95 && m.jpeg70_auc >= 0.85 && m.swap1_auc <= 0.65 && m.psnr_db >= 28.0 && hours <= 8.0 && reproduced;
    outcome(
        pass,
        format!(
            "clean AUC {:.3}, JPEG-70 AUC {:.3}, 1-swap AUC {:.3}, PSNR {:.2} dB, training {hours:.2} h, matches recorded baseline: {reproduced}",
            m.clean_auc, m.jpeg70_auc, m.swap1_auc, m.psnr_db
        ),
    )
}

/// Encoder gradients of the summed clean positive scores (`clean`) or of
/// every other branch.
fn encoder_grads(
    tr: &Trainer<f64>,
    batch: &ContrastiveBatch<f64>,
    maps: &KeyMaps,
    wrong: &KeyMaps,
    clean: bool,
) -> Result<Vec<Tensor<f64>>> {
    let n = batch.len();
    let n_pos = n * batch.positives_per_image();
    let g = Graph::new();
    let enc = tr.model.encoder.params().bind(&g, true);
    let dec = tr.model.decoder.params().bind(&g, true);
    let x_w = tr.model.embed_var(&enc, g.constant(batch.x.clone()), maps)?;
    let s = branch_scores(&g, &tr.model, &dec, x_w, batch, maps, wrong);
    let loss = if clean {
        s.positive.slice_batch(0, n).sum()
    } else {
        s.negative.sum().add(s.positive.slice_batch(n, n_pos - n).sum())
    };
    Ok(enc.grads(&g.backward(loss)))
}

fn gradient_isolation() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig::smoke();
    let tr = Trainer::<f64>::new(cfg.clone())?;
    let (h, w) = cfg.model.resolution();
    let imgs: Vec<Image<f64>> = synth::corpus(3, h, w, 4).iter().map(Image::cast).collect();
    let x = Image::batch(&imgs)?;
    let (k, kr) = tr.sample_keys(9)?;
    let mut perturber = AnalyticPerturber { curriculum: cfg.curriculum.clone() };
    let batch = build_contrastive_batch(&x, &k, &kr, &tr.model, &mut perturber, 2, 1.0, 11)?;
    let (maps, wrong) = (KeyMaps::new(&k, h, w)?, KeyMaps::new(&kr, h, w)?);
    let isolated = encoder_grads(&tr, &batch, &maps, &wrong, false)?;
    let zero = isolated.iter().all(|t| t.data().iter().all(|v| v.to_bits() == 0));
    let through = encoder_grads(&tr, &batch, &maps, &wrong, true)?;
    let live = through.iter().any(|t| t.data().iter().any(|&v| v != 0.0));
    let t = t0.elapsed();
    Ok(outcome(
        zero && live && t < Duration::from_secs(60),
        format!(
            "perturbed and wrong-key branches give bitwise-zero encoder gradients: {zero}; clean positive branch reaches the encoder: {live}; {}",
            secs(t)
        ),
    ))
}

/// k-th smallest by counting, without sorting.
fn kth_smallest(v: &[f64], k: usize) -> f64 {
    *v.iter()
        .find(|&&x| {
            let below = v.iter().filter(|&&y| y < x).count();
            let at = v.iter().filter(|&&y| y == x).count();
            below <= k && k < below + at
        })
        .expect("k within range")
}

fn autoclip() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut agree = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..60);
        let hist: Vec<f64> = (0..n).map(|_| if i % 3 == 0 { f64::from(rng.random_range(0..5u8)) } else { rng.random_range(0.0..20.0) }).collect();
        let p = match i % 4 {
            0 => 10.0,
            1 => 0.0,
            2 => 100.0,
            _ => rng.random_range(0.0..100.0),
        };
        let pos = p / 100.0 * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let (a, b) = (kth_smallest(&hist, lo), kth_smallest(&hist, hi));
        let want = a + (pos - lo as f64) * (b - a);
        agree += usize::from(autoclip_threshold(&hist, p) == Some(want));
    }
    let t = t0.elapsed();
    Ok(outcome(agree == 1000 && t < Duration::from_secs(60), format!("{agree}/1000 histories exact, {}", secs(t))))
}

fn hav_oracle() -> Result<Outcome> {
    let t0 = Instant::now();
    let groups = synthetic_groups(500, 32, 3, 7);
    let (train, held) = groups.split_at(400);
    let model = train_hav(train, HavConfig::desk(), HavTrainConfig::default())?;
    let e = evaluate_hav(&model, held)?;
    let t = t0.elapsed();
    let tie = ranknet_prob(0.37, 0.37) == 0.5 && ranknet_prob(-2.0, -2.0) == 0.5;
    Ok(outcome(
        e.mean_footrule <= 1.0 && e.within_two >= 0.8 && tie && t <= Duration::from_secs(30 * 60),
        format!(
            "held-out mean footrule {:.3}, footrule ≤ 2 on {:.1}% of {} groups, ranknet_prob(s, s) = 0.5: {tie}, {}",
            e.mean_footrule,
            100.0 * e.within_two,
            e.groups,
            secs(t)
        ),
    ))
}

fn max_linf(a: &[Image<f32>], b: &[Image<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(&p, &q)| (f64::from(p) - f64::from(q)).abs()))
        .fold(0.0, f64::max)
}

fn attacks(d: &Desk) -> Result<Outcome> {
    let t0 = Instant::now();
    let Some(b) = &d.baseline else {
        return Ok(outcome(false, "no locked 1%-FPR threshold recorded"));
    };
    let threshold = b.metrics.threshold_1pct_fpr;
    let key = desk::eval_key();
    let cfg = AttackConfig::default();
    let eps = cfg.linf_budget;
    let victims: Vec<Image<f32>> = desk::heldout_set().into_iter().take(100).collect();
    let x_w = d.model.embed(&victims, &key)?;
    let asr_of = |imgs: &[Image<f32>]| -> Result<f64> {
        let s = d.model.scores(imgs, &key)?;
        jigwm::attacks::asr(&s.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(), threshold)
    };

    let white = pgd_attack(&x_w, &key, &d.model, &cfg)?;
    let white_asr = asr_of(&white)?;

    // The surrogate never sees the key: it learns from unshuffled images only.
    let pool = desk::train_set();
    let (marked_src, clean_src) = pool[..1000].split_at(500);
    let marked = d.model.embed(marked_src, &new_key((4, 4), 1234)?)?;
    let (surrogate, _) = train_surrogate(&marked, clean_src, SurrogateConfig::default())?;
    let transfer = surrogate_attack(&x_w, &surrogate, &cfg)?;
    let transfer_asr = asr_of(&transfer)?;

    let linf = max_linf(&white, &x_w).max(max_linf(&transfer, &x_w));
    let in_range = white.iter().chain(&transfer).all(Image::in_unit_range);
    let t = t0.elapsed();
    Ok(outcome(
        white_asr >= 0.8 && transfer_asr < white_asr && linf <= eps && in_range && t <= Duration::from_secs(20 * 60),
        format!(
            "white-box ASR {white_asr:.3}, surrogate ASR {transfer_asr:.3} at locked threshold {threshold:.4}; max l∞ {linf:.6} ≤ {eps:.6}: {}; {}",
            linf <= eps,
            secs(t)
        ),
    ))
}

fn determinism() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = RunConfig::smoke();
    let (h, w) = cfg.model.resolution();
    let data = synth::corpus(8, h, w, 9);
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    let mut logs = Vec::new();
    let mut reports = Vec::new();
    for dir in &dirs {
        let mut tr = Trainer::<f32>::new(cfg.clone())?;
        let mut p = AnalyticPerturber { curriculum: cfg.curriculum.clone() };
        tr.fit(&data, &mut p, Some(dir.path()))?;
        logs.push(std::fs::read(dir.path().join("train_log.jsonl")).expect("log written"));
        let key = new_key((4, 4), 3)?;
        let r = evaluate(&tr.model, &data, &key, None, 1)?;
        reports.push((serde_json::to_string(&r)?, r.pos_scores, r.neg_scores));
    }
    let same_logs = !logs[0].is_empty() && logs[0] == logs[1];
    let same_reports = reports[0] == reports[1];
    let t = t0.elapsed();
    Ok(outcome(
        same_logs && same_reports,
        format!("loss logs identical: {same_logs} ({} bytes); detect reports identical: {same_reports}; {}", logs[0].len(), secs(t)),
    ))
}

fn report(n: usize, name: &str, r: std::result::Result<Outcome, String>) -> bool {
    let o = r.unwrap_or_else(|e| outcome(false, format!("error: {e}")));
    println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

/// Criterion numbers given as arguments select a subset; none runs all.
fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: usize| picked.is_empty() || picked.contains(&n);
    let s = |r: Result<Outcome>| r.map_err(|e| e.to_string());
    let mut all = true;
    if on(1) {
        all &= report(1, "jigsaw correctness", s(jigsaw_correctness()));
    }
    if on(2) {
        all &= report(2, "loss oracles", s(loss_oracles()));
    }
    if on(3) {
        all &= report(3, "metric oracles", s(metric_oracles()));
    }
    let desk = if on(4) || on(8) { Some(desk_model().map_err(|e| e.to_string())) } else { None };
    if let (true, Some(d)) = (on(4), &desk) {
        all &= report(4, "desk training separation", d.as_ref().map(desk_training).map_err(Clone::clone));
    }
    if on(5) {
        all &= report(5, "encoder gradient isolation", s(gradient_isolation()));
    }
    if on(6) {
        all &= report(6, "autoclip percentile", s(autoclip()));
    }
    if on(7) {
        all &= report(7, "HAV synthetic oracle", s(hav_oracle()));
    }
    if let (true, Some(d)) = (on(8), &desk) {
        let r = match d {
            Ok(d) => s(attacks(d)),
            Err(e) => Err(e.clone()),
        };
        all &= report(8, "attacks", r);
    }
    if on(9) {
        all &= report(9, "determinism", s(determinism()));
    }
    if !all {
        std::process::exit(1);
    }
}
