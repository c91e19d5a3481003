use std::io::{BufRead, Write};
use std::time::Duration;

use jigwm::attacks::{attack_report, pgd_attack, regeneration_attack, surrogate_attack, train_surrogate, REGENERATION_INSTRUCTION};
use jigwm::checkpoint::Checkpoint;
use jigwm::detect::{evaluate_marked, mismatch_study, tpr_at_fpr, DetectionReport};
use jigwm::hav::{evaluate_hav, hav_score, load_ranking_groups, synthetic_groups, train_hav, HavBand, HavModel};
use jigwm::image::Image;
use jigwm::jigsaw::{random_key, JigsawKey};
use jigwm::model::Model;
use jigwm::oracle::{analytic_edit, EditJob, OracleClient, OraclePerturber, OracleRequest};
use jigwm::perturb::{type1_eval_suite, AnalyticPerturber, PerturbationSpec, Perturber};
use jigwm::synth;
use jigwm::train::Trainer;
use serde::Serialize;

use crate::config::Settings;
use crate::dataset::{load_dir, load_instructions, png_name};
use crate::report::write_new;
use crate::{AttackArgs, AttackKind, Cli, Command, DetectArgs, EvaluateArgs, HavCommand, HavDataArgs, InputArgs, KeygenArgs, Suite, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(jigwm::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 3 for oracle failures, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_oracle() => 3,
            _ => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<jigwm::Error> for CliError {
    fn from(e: jigwm::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    if let Command::OracleStub = cli.command {
        return oracle_stub();
    }
    let s = Settings::load(&cli.global)?;
    match cli.command {
        Command::Train(a) => train(&s, a),
        Command::Keygen(a) => keygen(&s, a),
        Command::Embed(a) => embed(&s, a),
        Command::Detect(a) => detect(&s, a),
        Command::Evaluate(a) => evaluate(&s, a),
        Command::Attack(a) => attack(&s, a),
        Command::Hav { command } => hav(&s, command),
        Command::OracleStub => unreachable!("handled above"),
    }
}

fn oracle(s: &Settings) -> Result<Option<OracleClient>> {
    let Some(endpoint) = &s.oracle else { return Ok(None) };
    let mut c = OracleClient::from_endpoint(endpoint)?;
    if let Some(ms) = s.oracle_timeout_ms {
        c.timeout = Duration::from_millis(ms);
    }
    Ok(Some(c))
}

fn load_model(s: &Settings) -> Result<Model<f32>> {
    Ok(Checkpoint::load(s.checkpoint_path()?)?.model()?)
}

fn load_key(s: &Settings) -> Result<JigsawKey> {
    let p = s.key_path()?;
    if !p.exists() {
        return Err(CliError::usage(format!("key file {} not found", p.display())));
    }
    Ok(JigsawKey::load(p)?)
}

fn print_json<R: Serialize>(r: &R) {
    println!("{}", serde_json::to_string(r).expect("serializes"));
}

fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    let out = s.out_dir()?;
    let mut tr = match &s.checkpoint {
        Some(p) => Checkpoint::load(p)?.restore::<f32>()?,
        None => Trainer::new(s.run.clone())?,
    };
    let (h, w) = tr.config.model.resolution();
    let data: Vec<Image<f32>> = match (a.synthetic, a.data.as_ref().or(s.file.data.as_ref())) {
        (Some(n), _) => synth::corpus(n, h, w, s.seed),
        (None, Some(dir)) => load_dir(dir, h, w)?.into_iter().map(|(_, i)| i).collect(),
        (None, None) => return Err(CliError::usage("training needs --data or --synthetic")),
    };
    let mut perturber: Box<dyn Perturber<f32>> = match oracle(s)? {
        Some(client) => {
            let path = a
                .instructions
                .as_ref()
                .or(s.file.instructions.as_ref())
                .ok_or_else(|| CliError::usage("oracle training needs --instructions"))?;
            let instructions = load_instructions(path)?.into_values().collect();
            Box::new(OraclePerturber { client, instructions })
        }
        None => Box::new(AnalyticPerturber {
            curriculum: tr.config.curriculum.clone(),
        }),
    };
    let stop = a.epochs.unwrap_or(tr.config.train.epochs);
    tr.fit_until(&data, perturber.as_mut(), Some(out), stop)?;
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

fn parse_grid(g: &str) -> Result<(usize, usize)> {
    let bad = || CliError::usage(format!("grid {g:?} is not ROWSxCOLS"));
    let (r, c) = g.split_once('x').ok_or_else(bad)?;
    Ok((r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?))
}

fn keygen(s: &Settings, a: KeygenArgs) -> Result<()> {
    use rand::SeedableRng;
    let grid = parse_grid(&a.grid)?;
    let key = if s.seeded {
        random_key(grid, &mut rand_chacha::ChaCha8Rng::seed_from_u64(s.seed))?
    } else {
        random_key(grid, &mut rand::rng())?
    };
    let p = s.key_path()?;
    if p.exists() {
        return Err(CliError::usage(format!("{} exists; keys are never overwritten", p.display())));
    }
    key.save(p)?;
    println!("{}", key.id());
    Ok(())
}

fn embed(s: &Settings, a: InputArgs) -> Result<()> {
    let model = load_model(s)?;
    let key = load_key(s)?;
    let out = s.out_dir()?;
    let (h, w) = model.config.resolution();
    let items = load_dir(&a.input, h, w)?;
    let (names, imgs): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    for (name, m) in names.iter().zip(model.embed(&imgs, &key)?) {
        m.save_png(out.join(png_name(name)))?;
    }
    println!("{} images watermarked with key {}", names.len(), key.id());
    Ok(())
}

#[derive(Serialize)]
struct ImageScore {
    image: String,
    key_id: String,
    score: f64,
}

fn scores(model: &Model<f32>, key: &JigsawKey, imgs: &[Image<f32>]) -> Result<Vec<f64>> {
    Ok(model.scores(imgs, key)?.into_iter().map(f64::from).collect())
}

fn detect(s: &Settings, a: DetectArgs) -> Result<()> {
    let model = load_model(s)?;
    let key = load_key(s)?;
    let out = s.out_dir()?;
    let (h, w) = model.config.resolution();
    let (names, imgs): (Vec<_>, Vec<_>) = load_dir(&a.input, h, w)?.into_iter().unzip();
    let pos = scores(&model, &key, &imgs)?;
    let rows: Vec<ImageScore> = names
        .into_iter()
        .zip(&pos)
        .map(|(image, &score)| ImageScore {
            image,
            key_id: key.id(),
            score,
        })
        .collect();
    println!("{}", write_new(out, "scores", &rows)?.display());
    if let Some(neg_dir) = &a.negatives {
        let negs: Vec<Image<f32>> = load_dir(neg_dir, h, w)?.into_iter().map(|(_, i)| i).collect();
        let neg = scores(&model, &key, &negs)?;
        let r = DetectionReport::from_scores(key.id(), "none".into(), pos, neg)?;
        print_json(&r);
        println!("{}", write_new(out, "detect", &[r])?.display());
    }
    Ok(())
}

fn parse_band(b: &str) -> Result<HavBand> {
    let bad = || CliError::usage(format!("HAV band {b:?} is not LO:HI"));
    let (lo, hi) = b.split_once(':').ok_or_else(bad)?;
    let band = HavBand {
        lo: lo.parse().map_err(|_| bad())?,
        hi: hi.parse().map_err(|_| bad())?,
    };
    if !(band.lo <= band.hi) {
        return Err(bad());
    }
    Ok(band)
}

fn evaluate(s: &Settings, a: EvaluateArgs) -> Result<()> {
    let model = load_model(s)?;
    let key = load_key(s)?;
    let out = s.out_dir()?;
    let (h, w) = model.config.resolution();
    let (names, clean): (Vec<_>, Vec<_>) = load_dir(&a.input, h, w)?.into_iter().unzip();
    let marked = model.embed(&clean, &key)?;
    let run = |spec: Option<&PerturbationSpec>| evaluate_marked(&model, &clean, &marked, &key, &key, spec, s.seed);
    let reports: Vec<DetectionReport> = match a.suite {
        Suite::Clean => vec![run(None)?],
        Suite::Type1 => type1_eval_suite().iter().map(|p| run(Some(p))).collect::<jigwm::Result<_>>()?,
        Suite::Custom => {
            if a.perturb.is_empty() {
                return Err(CliError::usage("the custom suite needs at least one --perturb"));
            }
            let specs = a
                .perturb
                .iter()
                .map(|l| l.parse::<PerturbationSpec>())
                .collect::<jigwm::Result<Vec<_>>>()?;
            specs.iter().map(|p| run(Some(p))).collect::<jigwm::Result<_>>()?
        }
        Suite::Mismatch => {
            let max = key.blocks() / 2;
            let mut r = mismatch_study(&model, &clean, &key, max, s.seed)?;
            r.remove(0);
            r
        }
        Suite::Oracle => vec![oracle_report(s, &a, &model, &key, &names, &clean, &marked)?],
    };
    for r in &reports {
        print_json(r);
    }
    println!("{}", write_new(out, "evaluate", &reports)?.display());
    Ok(())
}

/// Positives are oracle edits of the watermarked images, negatives the same
/// edits of the clean ones. With a HAV model, only images whose watermarked
/// edit scores inside the band are kept.
fn oracle_report(
    s: &Settings,
    a: &EvaluateArgs,
    model: &Model<f32>,
    key: &JigsawKey,
    names: &[String],
    clean: &[Image<f32>],
    marked: &[Image<f32>],
) -> Result<DetectionReport> {
    let client = oracle(s)?.ok_or_else(|| CliError::usage("the oracle suite needs --oracle"))?;
    let path = a
        .instructions
        .as_ref()
        .or(s.file.instructions.as_ref())
        .ok_or_else(|| CliError::usage("the oracle suite needs --instructions"))?;
    let instructions = load_instructions(path)?;
    let picked: Vec<usize> = (0..names.len()).filter(|&i| instructions.contains_key(&names[i])).collect();
    if picked.is_empty() {
        return Err(CliError::usage("no input image has an instruction"));
    }
    let jobs: Vec<EditJob<f32>> = picked
        .iter()
        .map(|&i| EditJob {
            id: format!("{:016x}-eval-{i}", s.seed),
            instruction: instructions[&names[i]].clone(),
            images: vec![clean[i].clone(), marked[i].clone()],
        })
        .collect();
    let edited = client.edit(&jobs)?;
    let mut keep: Vec<usize> = (0..picked.len()).collect();
    let mut label = "oracle".to_string();
    if let Some(hp) = &a.hav {
        let band = parse_band(&a.hav_band)?;
        let hav = HavModel::<f32>::load(hp)?;
        let originals: Vec<Image<f32>> = picked.iter().map(|&i| marked[i].clone()).collect();
        let variants: Vec<Image<f32>> = edited.iter().map(|e| e[1].clone()).collect();
        let h = hav.scores(&originals, &variants)?;
        keep.retain(|&k| band.contains(h[k]));
        label = format!("oracle|hav={}:{}", band.lo, band.hi);
        if keep.is_empty() {
            return Err(CliError::usage(format!("no oracle edit falls inside HAV band {}", a.hav_band)));
        }
    }
    let neg_imgs: Vec<Image<f32>> = keep.iter().map(|&k| edited[k][0].clone()).collect();
    let pos_imgs: Vec<Image<f32>> = keep.iter().map(|&k| edited[k][1].clone()).collect();
    let pos = scores(model, key, &pos_imgs)?;
    let neg = scores(model, key, &neg_imgs)?;
    Ok(DetectionReport::from_scores(key.id(), label, pos, neg)?)
}

fn attack(s: &Settings, a: AttackArgs) -> Result<()> {
    let model = load_model(s)?;
    let key = load_key(s)?;
    let out = s.out_dir()?;
    let (h, w) = model.config.resolution();
    let (names, clean): (Vec<_>, Vec<_>) = load_dir(&a.input, h, w)?.into_iter().unzip();
    let marked = model.embed(&clean, &key)?;
    let (_, threshold) = tpr_at_fpr(&scores(&model, &key, &marked)?, &scores(&model, &key, &clean)?, 0.01)?;
    let cfg = &s.file.attack;
    let (name, attacked, budget) = match a.kind {
        AttackKind::Pgd => ("pgd", pgd_attack(&marked, &key, &model, cfg)?, Some(cfg)),
        AttackKind::Surrogate => {
            let n = s.file.surrogate_samples;
            let train_clean = synth::corpus(n, h, w, s.seed.wrapping_add(1));
            let train_marked = model.embed(&synth::corpus(n, h, w, s.seed.wrapping_add(2)), &key)?;
            let (sur, _) = train_surrogate(&train_marked, &train_clean, s.file.surrogate.clone())?;
            ("surrogate", surrogate_attack(&marked, &sur, cfg)?, Some(cfg))
        }
        AttackKind::Regeneration => {
            let client = oracle(s)?.ok_or_else(|| CliError::usage("regeneration needs --oracle"))?;
            ("regeneration", regeneration_attack(&marked, &client, REGENERATION_INSTRUCTION, s.seed)?, None)
        }
    };
    let hav = a.hav.as_ref().map(HavModel::<f32>::load).transpose()?;
    let report = attack_report(name, budget, &model, &key, &marked, &attacked, threshold, hav.as_ref())?;
    if a.save_images {
        let dir = out.join(format!("attacked-{name}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::usage(format!("{}: {e}", dir.display())))?;
        for (n, im) in names.iter().zip(&attacked) {
            im.save_png(dir.join(png_name(n)))?;
        }
    }
    print_json(&report);
    println!("{}", write_new(out, "attack", &[report])?.display());
    Ok(())
}

fn hav_groups(s: &Settings, a: &HavDataArgs) -> Result<Vec<jigwm::hav::RankingGroup<f32>>> {
    match (a.synthetic, &a.dataset) {
        (Some(n), _) => Ok(synthetic_groups(n, s.file.hav.image_size, 3, s.seed)),
        (None, Some(p)) => Ok(load_ranking_groups(p)?),
        (None, None) => Err(CliError::usage("HAV commands need --dataset or --synthetic")),
    }
}

fn hav(s: &Settings, c: HavCommand) -> Result<()> {
    match c {
        HavCommand::Train(a) => {
            let out = s.out_dir()?;
            let groups = hav_groups(s, &a)?;
            let held = ((groups.len() as f64 * s.file.hav.holdout).round() as usize).min(groups.len() - 1);
            let (fit, val) = groups.split_at(groups.len() - held);
            let mut tc = s.file.hav.train.clone();
            tc.seed = s.seed;
            let mut m = train_hav(fit, s.file.hav.model.clone(), tc)?;
            if !val.is_empty() {
                m.calibrate(val)?;
                let e = evaluate_hav(&m, val)?;
                print_json(&e);
                write_new(out, "hav-eval", &[e])?;
            }
            let path = out.join("hav.json");
            m.save(&path)?;
            println!("{}", path.display());
        }
        HavCommand::Eval(a) => {
            let m = HavModel::<f32>::load(s.checkpoint_path()?)?;
            let e = evaluate_hav(&m, &hav_groups(s, &a)?)?;
            print_json(&e);
            if let Some(out) = &s.out {
                std::fs::create_dir_all(out).map_err(|e| CliError::usage(format!("{}: {e}", out.display())))?;
                write_new(out, "hav-eval", &[e])?;
            }
        }
        HavCommand::Score { original, variant } => {
            let m = HavModel::<f32>::load(s.checkpoint_path()?)?;
            let o = Image::<f32>::load_png(&original)?;
            let v = Image::<f32>::load_png(&variant)?;
            println!("{}", hav_score(&o, &v, &m)?);
        }
    }
    Ok(())
}

/// Serves analytic edits over stdin/stdout until stdin closes.
fn oracle_stub() -> Result<()> {
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.map_err(|e| CliError::usage(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let req: OracleRequest = serde_json::from_str(&line).map_err(|e| CliError::usage(format!("bad request: {e}")))?;
        let resp = analytic_edit(&req);
        writeln!(stdout, "{}", serde_json::to_string(&resp).expect("serializes"))
            .and_then(|_| stdout.flush())
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}
