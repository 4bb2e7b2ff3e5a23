//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Every tolerance is a constant below.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmocc::autodiff::{grad_check, Binding, GradCheckOptions, Var};
use fmocc::config::RunConfig;
use fmocc::flow::{euler_integrate, target_velocity, HeadOn};
use fmocc::mask::mask_schedule;
use fmocc::metrics::{make_ray_set, rayiou, MetricsDocument, RAY_THRESHOLDS_M};
use fmocc::model::{binding_for, randomized};
use fmocc::pipeline::{self, Split};
use fmocc::scene::{SemanticLabelGrid, FREE};
use fmocc::ssm::scan::{scan_chunked, scan_reference, ScanDims, ScanInputs, DEFAULT_CHUNK};
use fmocc::ssm::{plane_ssm_block_on, selective_params, ssm_scan, BlockVars, SsmBlockParams};
use fmocc::tpv::{encode_labels, encode_labels_on, tpv_aggregate_on, tpv_reduce_on};
use fmocc::{FmOcc, LabelEmbedding, ModelConfig, OccHead, SsmConfig, Tape, Tensor, TpvSsmLayer, VoxelFeatureGrid};

const SCAN_TOL: f64 = 1e-10;
const SCAN_SEQUENCES: usize = 100;
const SCAN_MAX_LEN: usize = 4096;
const GRAD_TOL: f64 = 1e-4;
const EULER_TOL: f64 = 1e-12;
const FMSSM_MARGIN: f64 = 0.05;
const SEEDS: [u64; 3] = [0, 1, 2];
const HIGH_MASK: f64 = 0.5;
const MONOTONE_PAIRS: usize = 50;
const ENCODE_DRAWS: usize = 1_000_000;
const EMBED_RANGE: f64 = 15.0;
const SCALE_RANGE: (f64, f64) = (0.01, 100.0);
const SCHEDULE_BETA: f64 = 25.0;
const SCHEDULE_EPOCHS: usize = 24;
const BENCH_RATIO_MAX: f64 = 5.0;

type Outcome = anyhow::Result<(bool, String)>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 1
fn scan_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..SCAN_SEQUENCES {
        let len = if i == 0 { SCAN_MAX_LEN } else { rng.random_range(1..=SCAN_MAX_LEN) };
        let (ch, n) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let normal = |rng: &mut ChaCha8Rng, k: usize| Tensor::randn(&[k], 1.0, rng).data().to_vec();
        let x = normal(&mut rng, len * ch);
        let delta: Vec<f64> = (0..len * ch).map(|_| rng.random_range(1e-3..1.0)).collect();
        let a: Vec<f64> = (0..ch * n).map(|_| -rng.random_range(0.05..4.0)).collect();
        let (b, c, d) = (normal(&mut rng, len * n), normal(&mut rng, len * n), normal(&mut rng, ch));
        let io = ScanInputs {
            dims: ScanDims { len, channels: ch, state: n },
            x: &x,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &d,
        };
        let fast = scan_chunked(&io, DEFAULT_CHUNK).y;
        let slow = scan_reference(&io);
        worst = fast.iter().zip(&slow).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);

        // The public op, selective parameters included, against a naive loop.
        let block = SsmBlockParams::init(ch, n, &mut rng);
        let xt = Tensor::from_vec(vec![len, ch], x.clone())?;
        let y = ssm_scan(&xt, &block)?;
        let (bt, ct, dt) = selective_params(&xt, &block)?;
        let mut h = vec![0.0; ch * n];
        for k in 0..len {
            for j in 0..ch {
                let (step, xv) = (dt.data()[k * ch + j], x[k * ch + j]);
                let mut acc = 0.0;
                for s in 0..n {
                    let decay = (-step * block.a_log.data()[j * n + s].exp()).exp();
                    h[j * n + s] = decay * h[j * n + s] + step * bt.data()[k * n + s] * xv;
                    acc += ct.data()[k * n + s] * h[j * n + s];
                }
                let want = acc + block.d_skip.data()[j] * xv;
                worst = worst.max((y.data()[k * ch + j] - want).abs());
            }
        }
    }
    Ok((worst <= SCAN_TOL, format!("max |optimized - naive| = {worst:.3e} over {SCAN_SEQUENCES} sequences")))
}

fn weighted_sum(tape: &mut Tape, v: Var, w: &Tensor) -> fmocc::Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(v, wv)?;
    tape.sum(p)
}

// 2
fn gradient_suite() -> Outcome {
    let opts = GradCheckOptions::default;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let labels = SemanticLabelGrid::from_vec([4, 4, 2], 6, (0..32).map(|i| (i * 7 % 6) as u16).collect())?;
    let table = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 4, 2, 3], 1.0, &mut rng);
    errs.push((
        "encode_labels",
        grad_check(|t, v| { let e = encode_labels_on(t, v[0], &labels, 1.3)?; weighted_sum(t, e, &w) }, &[table], opts())?,
    ));

    let grid = Tensor::randn(&[4, 4, 2, 3], 1.0, &mut rng);
    let planes_w: Vec<Tensor> = [[4, 4, 3], [4, 2, 3], [2, 4, 3]].iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    errs.push((
        "tpv_reduce",
        grad_check(
            |t, v| {
                let [a, b, c] = tpv_reduce_on(t, v[0])?;
                let (sa, sb, sc) = (weighted_sum(t, a, &planes_w[0])?, weighted_sum(t, b, &planes_w[1])?, weighted_sum(t, c, &planes_w[2])?);
                let s = t.add(sa, sb)?;
                t.add(s, sc)
            },
            std::slice::from_ref(&grid),
            opts(),
        )?,
    ));
    let planes: Vec<Tensor> = planes_w.iter().map(|p| Tensor::randn(p.shape(), 1.0, &mut rng)).collect();
    errs.push((
        "tpv_aggregate",
        grad_check(
            |t, v| {
                let g = tpv_aggregate_on(t, [v[0], v[1], v[2]])?;
                let sq = t.square(g)?;
                weighted_sum(t, sq, &w)
            },
            &planes,
            opts(),
        )?,
    ));

    let mut block = SsmBlockParams::init(3, 2, &mut rng);
    block.out_proj = Tensor::randn(&[3, 3], 0.5, &mut rng);
    block.b_delta = Tensor::randn(&[3], 0.5, &mut rng);
    let plane = Tensor::randn(&[16, 3], 1.0, &mut rng);
    let temb = Tensor::randn(&[3], 0.5, &mut rng);
    let pw = Tensor::randn(&[16, 3], 1.0, &mut rng);
    let bp = vec![
        plane, temb, block.a_log, block.d_skip, block.w_b, block.w_c, block.w_delta, block.b_delta, block.in_proj,
        block.out_proj, block.norm_gain,
    ];
    errs.push((
        "plane_ssm_block",
        grad_check(
            |t, v| {
                let vars = BlockVars {
                    a_log: v[2],
                    d_skip: v[3],
                    w_b: v[4],
                    w_c: v[5],
                    w_delta: v[6],
                    b_delta: v[7],
                    in_proj: v[8],
                    out_proj: v[9],
                    norm_gain: v[10],
                };
                let out = plane_ssm_block_on(t, v[0], 4, 4, v[1], &vars, 1e-5)?;
                weighted_sum(t, out, &pw)
            },
            &bp,
            opts(),
        )?,
    ));

    let layer = TpvSsmLayer::new(3, SsmConfig { state_size: 2, depth: 1, ..Default::default() })?;
    let lp = randomized(&layer.init_params(&mut rng), 0.4, &mut rng);
    let names: Vec<String> = lp.iter().map(|(n, _)| n.to_string()).collect();
    let mut inputs = planes.clone();
    inputs.extend(lp.iter().map(|(_, t)| t.clone()));
    errs.push((
        "tpv_ssm_layer",
        grad_check(
            |t, v| {
                let b = binding_for(&names, &v[3..]);
                let out = layer.forward_on(t, &b, [v[0], v[1], v[2]], 0.4)?;
                let mut total = weighted_sum(t, out[0], &planes_w[0])?;
                for i in 1..3 {
                    let s = weighted_sum(t, out[i], &planes_w[i])?;
                    total = t.add(total, s)?;
                }
                Ok(total)
            },
            &inputs,
            GradCheckOptions { max_coords_per_param: 8, ..opts() },
        )?,
    ));

    let head = OccHead::new(3, 5, 6);
    let hp = randomized(&head.init_params(&mut rng), 0.5, &mut rng);
    let hn: Vec<String> = hp.iter().map(|(n, _)| n.to_string()).collect();
    let mut hin = vec![grid.clone()];
    hin.extend(hp.iter().map(|(_, t)| t.clone()));
    let targets: Vec<usize> = labels.labels().iter().map(|l| *l as usize).collect();
    errs.push((
        "occ_head",
        grad_check(
            |t, v| {
                let vars: BTreeMap<String, Var> = hn.iter().cloned().zip(v[1..].iter().copied()).collect();
                let logits = head.forward_on(t, &Binding::from_vars(vars), v[0])?;
                t.softmax_cross_entropy(logits, &targets)
            },
            &hin,
            opts(),
        )?,
    ));

    let model = FmOcc::new(
        3,
        6,
        ModelConfig {
            head_hidden: 5,
            ssm: SsmConfig { state_size: 2, depth: 1, ..Default::default() },
            train_embedding: true,
            ..Default::default()
        },
    )?;
    let mp = randomized(&model.init_params(&mut rng)?, 0.4, &mut rng);
    let mn: Vec<String> = mp.iter().map(|(n, _)| n.to_string()).collect();
    let min: Vec<Tensor> = mp.iter().map(|(_, t)| t.clone().with_requires_grad(true)).collect();
    let v0 = VoxelFeatureGrid::from_vec([4, 4, 2], 3, Tensor::randn(&[96], 1.0, &mut rng).data().to_vec())?;
    errs.push((
        "composed flow loss",
        grad_check(
            |t, v| {
                let b = binding_for(&mn, v);
                let (flow, ce) = model.losses_on(t, &b, &v0, &labels, 0.35, HeadOn::OneStep, 2)?;
                t.add(flow.expect("refining model has a flow loss"), ce)
            },
            &min,
            GradCheckOptions { max_coords_per_param: 8, ..opts() },
        )?,
    ));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok((worst < GRAD_TOL, detail.join(", ")))
}

// 3
fn euler_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mk = |rng: &mut ChaCha8Rng| VoxelFeatureGrid::from_vec([6, 5, 3], 4, Tensor::randn(&[360], 3.0, rng).data().to_vec());
    let (v0, v1) = (mk(&mut rng)?, mk(&mut rng)?);
    let oracle = target_velocity(&v0, &v1)?;
    let mut worst: f64 = 0.0;
    for n in [1, 2, 4, 8] {
        let out = euler_integrate(&v0, n, |_, _| Ok(oracle.clone()))?;
        worst = out.data().iter().zip(v1.data()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Ok((worst <= EULER_TOL, format!("max |V_n - V1| = {worst:.3e} for n in {{1,2,4,8}}")))
}

struct Trained {
    clean: f64,
    masked: f64,
}

fn train_and_eval(base: &RunConfig, data: &Path, root: &Path, name: &str) -> anyhow::Result<Trained> {
    let run = root.join(name);
    pipeline::train_run(base, data, &run, false)?;
    let ck = pipeline::checkpoint_dir(&run).join(pipeline::FINAL_CHECKPOINT);
    let reports = pipeline::eval_run(base, &ck, data, Split::Eval, &[0.0, HIGH_MASK], &run.join("eval"), name)?;
    Ok(Trained {
        clean: reports[0].1.miou,
        masked: reports[1].1.miou,
    })
}

// 4 and 5 share their training runs.
fn ablations() -> anyhow::Result<(Outcome, Outcome)> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig::default();
    let data = dir.path().join("data");
    pipeline::generate_dataset(&cfg, &data)?;
    let (mut margins, mut mt_drop, mut plain_drop) = (Vec::new(), Vec::new(), Vec::new());
    let mut rows = Vec::new();
    for seed in SEEDS {
        let started = Instant::now();
        let mut fm = cfg.clone();
        fm.seed = seed;
        let mut base = fm.clone();
        base.model.fmssm = false;
        let mut no_mt = fm.clone();
        no_mt.mask.enabled = false;
        let a = train_and_eval(&fm, &data, dir.path(), &format!("fmssm_{seed}"))?;
        let b = train_and_eval(&base, &data, dir.path(), &format!("baseline_{seed}"))?;
        let c = train_and_eval(&no_mt, &data, dir.path(), &format!("no_mt_{seed}"))?;
        margins.push(a.clean - b.clean);
        mt_drop.push(a.clean - a.masked);
        plain_drop.push(c.clean - c.masked);
        rows.push(format!(
            "  seed {seed}: fmssm {:.4}/{:.4} baseline {:.4} no_mt {:.4}/{:.4} ({:.0}s)",
            a.clean,
            a.masked,
            b.clean,
            c.clean,
            c.masked,
            started.elapsed().as_secs_f64()
        ));
    }
    for r in &rows {
        println!("{r}");
    }
    let m = median(margins.clone());
    let c4 = Ok((m >= FMSSM_MARGIN, format!("median mIoU margin {m:.4} (per seed {margins:.4?}), need >= {FMSSM_MARGIN}")));
    let (dm, dp) = (median(mt_drop.clone()), median(plain_drop.clone()));
    let c5 = Ok((
        dm < dp,
        format!("median mIoU drop 0 -> {HIGH_MASK}: MT {dm:.4} (per seed {mt_drop:.4?}) vs no MT {dp:.4} (per seed {plain_drop:.4?})"),
    ));
    Ok((c4, c5))
}

// 6
fn metric_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let rays = make_ray_set(72, 4)?;
    let random = |rng: &mut ChaCha8Rng| {
        let labels = (0..16 * 16 * 4)
            .map(|_| if rng.random_bool(0.12) { rng.random_range(1..6u16) } else { FREE })
            .collect();
        SemanticLabelGrid::from_vec([16, 16, 4], 6, labels)
    };
    let origin = [8.5, 8.5, 1.5];
    let mut identity_ok = true;
    let mut monotone_ok = true;
    for _ in 0..MONOTONE_PAIRS {
        let (a, b) = (random(&mut rng)?, random(&mut rng)?);
        let same = rayiou(&a, &a, origin, &rays, &RAY_THRESHOLDS_M, 0.4)?;
        identity_ok &= same.iter().all(|v| *v == 1.0);
        let s = rayiou(&a, &b, origin, &rays, &RAY_THRESHOLDS_M, 0.4)?;
        monotone_ok &= s[0] <= s[1] && s[1] <= s[2];
    }

    // A 2x2x2 box shifted by 3 voxels (1.2 m) along the viewing axis.
    let mut gt = SemanticLabelGrid::filled([24, 16, 4], 6, FREE);
    let mut pred = gt.clone();
    for (x, y, z) in (0..2).flat_map(|x| (7..9).flat_map(move |y| (0..2).map(move |z| (x, y, z)))) {
        gt.set(10 + x, y, z, 2);
        pred.set(13 + x, y, z, 2);
    }
    let origin = [4.5, 8.0, 1.0];
    let rays = make_ray_set(360, 8)?;
    let got = rayiou(&pred, &gt, origin, &rays, &RAY_THRESHOLDS_M, 0.4)?;
    let expected = enumerate_rayiou(&pred, &gt, origin, &rays, 0.4);
    let shifted_ok = got == expected;
    Ok((
        identity_ok && monotone_ok && shifted_ok,
        format!(
            "identity {identity_ok}, monotone on {MONOTONE_PAIRS} pairs {monotone_ok}, shifted box {got:?} vs oracle {expected:?}"
        ),
    ))
}

/// Exhaustive oracle: for every ray, intersect every occupied voxel as an
/// axis-aligned slab and keep the nearest one entered with positive chord.
fn enumerate_rayiou(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid, origin: [f64; 3], rays: &[[f64; 3]], voxel: f64) -> Vec<f64> {
    fn first(g: &SemanticLabelGrid, o: [f64; 3], d: [f64; 3]) -> Option<([usize; 3], u16)> {
        let [nx, ny, nz] = g.dims();
        let mut best: Option<(f64, [usize; 3])> = None;
        for cell in (0..nx).flat_map(|x| (0..ny).flat_map(move |y| (0..nz).map(move |z| [x, y, z]))) {
            if g.get(cell[0], cell[1], cell[2]) == FREE {
                continue;
            }
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                let (c0, c1) = (cell[a] as f64, cell[a] as f64 + 1.0);
                if d[a] == 0.0 {
                    if o[a] < c0 || o[a] >= c1 {
                        hi = -1.0;
                    }
                } else {
                    let (t0, t1) = ((c0 - o[a]) / d[a], (c1 - o[a]) / d[a]);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
            }
            if hi - lo > 1e-9 && best.is_none_or(|(t, _)| lo < t) {
                best = Some((lo, cell));
            }
        }
        best.map(|(_, c)| (c, g.get(c[0], c[1], c[2])))
    }
    let dist = |c: [usize; 3]| voxel * (0..3).map(|a| (c[a] as f64 + 0.5 - origin[a]).powi(2)).sum::<f64>().sqrt();
    let k = gt.num_classes();
    let mut tp = vec![vec![0u64; k]; RAY_THRESHOLDS_M.len()];
    let (mut np, mut ng) = (vec![0u64; k], vec![0u64; k]);
    for d in rays {
        let (hg, hp) = (first(gt, origin, *d), first(pred, origin, *d));
        if let Some((_, c)) = hg {
            ng[c as usize] += 1;
        }
        if let Some((_, c)) = hp {
            np[c as usize] += 1;
        }
        if let (Some((a, ca)), Some((b, cb))) = (hg, hp) {
            if ca == cb {
                for (i, tau) in RAY_THRESHOLDS_M.iter().enumerate() {
                    tp[i][ca as usize] += ((dist(a) - dist(b)).abs() <= *tau) as u64;
                }
            }
        }
    }
    tp.iter()
        .map(|row| {
            let ious: Vec<f64> = (1..k)
                .filter(|&c| np[c] + ng[c] > 0)
                .map(|c| row[c] as f64 / (np[c] + ng[c] - row[c]) as f64)
                .collect();
            if ious.is_empty() {
                1.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            }
        })
        .collect()
}

// 7
fn encoding_range() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dims = [10, 10, 10];
    let per_batch: usize = dims.iter().product();
    let mut violations = 0usize;
    let mut draws = 0usize;
    while draws < ENCODE_DRAWS {
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let table: Vec<f64> = (0..6).map(|_| rng.random_range(-EMBED_RANGE..=EMBED_RANGE)).collect();
        let emb = LabelEmbedding::new(Tensor::from_vec(vec![6, 1], table)?, scale)?;
        let labels = SemanticLabelGrid::from_vec(dims, 6, (0..per_batch).map(|_| rng.random_range(0..6u16)).collect())?;
        let enc = encode_labels(&labels, &emb)?;
        violations += enc.data().iter().filter(|v| !(**v > -scale && **v < 0.0)).count();
        draws += per_batch;
    }
    Ok((
        violations == 0,
        format!("{violations} of {draws} encoded values outside (-scale, 0); e in [-{EMBED_RANGE}, {EMBED_RANGE}], scale in {SCALE_RANGE:?}"),
    ))
}

// 8
fn schedule_endpoints() -> Outcome {
    let start = mask_schedule(0.0, SCHEDULE_EPOCHS, SCHEDULE_BETA)?;
    let end = mask_schedule(SCHEDULE_EPOCHS as f64, SCHEDULE_EPOCHS, SCHEDULE_BETA)?;
    Ok((start == 0.0 && end == 0.25, format!("p_drop(0) = {start}, p_drop(E) = {end}")))
}

fn cli(args: &[&str]) -> anyhow::Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fmocc")).args(args).output()?;
    if !out.status.success() {
        anyhow::bail!("fmocc {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// 9
fn bench_ratio() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("bench.toml");
    fs::write(&cfg, "[bench]\nscan_lengths = [1024, 4096]\neuler_steps = [1]\nrepeats = 7\n")?;
    let out = dir.path().join("out");
    cli(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "bench"])?;
    let csv = fs::read_to_string(out.join("bench.csv"))?;
    let time = |n: &str| {
        csv.lines()
            .find(|l| l.starts_with(&format!("ssm_scan,{n},")))
            .and_then(|l| l.split(',').nth(2))
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| anyhow::anyhow!("bench.csv has no ssm_scan row for L={n}"))
    };
    let ratio = time("4096")? / time("1024")?;
    Ok((ratio <= BENCH_RATIO_MAX, format!("time(4096)/time(1024) = {ratio:.3} from bench.csv")))
}

// 10
fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir()?;
    let cfg = dir.path().join("repro.toml");
    fs::write(
        &cfg,
        "seed = 5\n[scene]\ndims = [16, 16, 4]\nego = [8, 8, 1]\nnum_boxes = 5\n[data]\nn_train = 8\nn_eval = 4\n\
         [train]\nepochs = 3\nbatch_size = 4\ncheckpoint_every = 1\n[eval]\nn_azimuth = 36\nn_elevation = 2\n",
    )?;
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
        cli(&["--config", c, "--out", o, "gen"])?;
        cli(&["--config", c, "--out", o, "train"])?;
        cli(&["--config", c, "--out", o, "eval", "--mask-ratio", "0", "--mask-ratio", "0.3"])?;
        let run = out.join("runs").join("repro");
        let ck = fs::read(pipeline::checkpoint_dir(&run).join(pipeline::FINAL_CHECKPOINT))?;
        let m0 = fs::read(run.join("eval").join(pipeline::metrics_file_name(0.0)))?;
        let m3 = fs::read(run.join("eval").join(pipeline::metrics_file_name(0.3)))?;
        MetricsDocument::parse(std::str::from_utf8(&m0)?)?.number("miou")?;
        files.push((ck, m0, m3));
    }
    let same_ck = files[0].0 == files[1].0;
    let same_metrics = files[0].1 == files[1].1 && files[0].2 == files[1].2;
    Ok((same_ck && same_metrics, format!("checkpoints identical {same_ck}, metric documents identical {same_metrics}")))
}

fn report(id: usize, name: &str, started: Instant, outcome: Outcome, failures: &mut usize) {
    let secs = started.elapsed().as_secs_f64();
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    if !ok {
        *failures += 1;
    }
    println!("criterion {id:>2} {} {name}: {detail} [{secs:.1}s]", if ok { "PASS" } else { "FAIL" });
}

fn main() {
    let mut failures = 0;
    let t = Instant::now();
    report(1, "scan oracle", t, scan_oracle(), &mut failures);
    let t = Instant::now();
    report(2, "gradient suite", t, gradient_suite(), &mut failures);
    let t = Instant::now();
    report(3, "straight-path Euler", t, euler_exactness(), &mut failures);
    let t = Instant::now();
    match ablations() {
        Ok((c4, c5)) => {
            report(4, "FMSSM beats baseline", t, c4, &mut failures);
            report(5, "mask-training robustness", t, c5, &mut failures);
        }
        Err(e) => {
            report(4, "FMSSM beats baseline", t, Err(anyhow::anyhow!("{e:#}")), &mut failures);
            report(5, "mask-training robustness", t, Err(e), &mut failures);
        }
    }
    let t = Instant::now();
    report(6, "metric correctness", t, metric_correctness(), &mut failures);
    let t = Instant::now();
    report(7, "encoding range", t, encoding_range(), &mut failures);
    let t = Instant::now();
    report(8, "mask schedule endpoints", t, schedule_endpoints(), &mut failures);
    let t = Instant::now();
    report(9, "linear scan scaling", t, bench_ratio(), &mut failures);
    let t = Instant::now();
    report(10, "reproducibility", t, reproducibility(), &mut failures);
    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
