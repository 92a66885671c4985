//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use thm_core::attention::{
    coattention, multi_head, nonlocal_op, scaled_dot_attention, self_routing, AttentionHeadParams, MultiHeadParams,
};
use thm_core::data::{encode_corpus, gen_synthetic, learn_bpe, token_swap_corrupt, IdMatrix, Task, BOS, NUM_SPECIALS};
use thm_core::eval::{corpus_bleu, teacher_forced};
use thm_core::gradcheck::Coverage;
use thm_core::model::{count_parameters, Arch, Model, ModelConfig};
use thm_core::train::{
    checkpoint_path, model_gradcheck, resume, run_experiment, topk_selection, EpochRow, ExperimentData, RunRecord,
    TrainConfig, Trainer, LOSS_LOG,
};
use thm_core::{Rng, Tensor};

mod common;
use common::brute_bleu;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal(0.0, 1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn random_mha(rng: &mut Rng, d: usize, heads: usize) -> MultiHeadParams {
    let dk = d / heads;
    MultiHeadParams {
        heads: (0..heads)
            .map(|_| AttentionHeadParams {
                w_q: random_tensor(rng, d, dk),
                w_k: random_tensor(rng, d, dk),
                w_v: random_tensor(rng, d, dk),
            })
            .collect(),
        w_o: random_tensor(rng, d, d),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn degradation_identity() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 1 + rng.below(8);
        let divisors: Vec<usize> = (1..=d).filter(|h| d.is_multiple_of(*h)).collect();
        let heads = divisors[rng.below(divisors.len())];
        let (nl, nr) = (1 + rng.below(8), 1 + rng.below(8));
        let (xl, xr) = (random_tensor(&mut rng, nl, d), random_tensor(&mut rng, nr, d));
        let (pl, pr) = (random_mha(&mut rng, d, heads), random_mha(&mut rng, d, heads));
        let (alpha, beta) = self_routing();
        let (yl, yr) = coattention(&xl, &xr, alpha, beta, &pl, &pr, (None, None)).map_err(|e| e.to_string())?;
        let sl = multi_head(&xl, &xl, &xl, &pl, None).map_err(|e| e.to_string())?;
        let sr = multi_head(&xr, &xr, &xr, &pr, None).map_err(|e| e.to_string())?;
        worst = worst.max(yl.max_abs_diff(&sl).unwrap()).max(yr.max_abs_diff(&sr).unwrap());
    }
    check(worst < 1e-10, format!("max abs diff {worst:.3e} over 100 instances"))
}

fn nonlocal_oracle() -> Outcome {
    let mut rng = Rng::new(202);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (d, dk, dv) = (1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6));
        let (nq, nk) = (2 + rng.below(5), 2 + rng.below(5));
        let (q, k, v) = (random_tensor(&mut rng, nq, d), random_tensor(&mut rng, nk, d), random_tensor(&mut rng, nk, d));
        let p = AttentionHeadParams {
            w_q: random_tensor(&mut rng, d, dk),
            w_k: random_tensor(&mut rng, d, dk),
            w_v: random_tensor(&mut rng, d, dv),
        };
        let got = scaled_dot_attention(&q, &k, &v, &p, None, true).map_err(|e| e.to_string())?;
        let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols()).map(|c| x.iter().enumerate().map(|(r, xi)| xi * w.get(r, c)).sum()).collect()
        };
        let s = 1.0 / (dk as f64).sqrt();
        let pair = |qi: &[f64], kj: &[f64]| {
            let a = proj(qi, &p.w_q);
            let b = proj(kj, &p.w_k);
            (s * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()).exp()
        };
        let unary = |vj: &[f64]| proj(vj, &p.w_v);
        let norm = |qi: &[f64], keys: &Tensor| (0..keys.rows()).map(|j| pair(qi, keys.row(j))).sum::<f64>();
        let want = nonlocal_op(&q, &k, &v, pair, unary, norm).map_err(|e| e.to_string())?;
        worst = worst.max(got.max_abs_diff(&want).unwrap());
    }
    check(worst < 1e-10, format!("max abs diff {worst:.3e} over 100 instances"))
}

/// Residual of `x` after projection onto the span of `rows`.
fn span_residual(rows: &[Vec<f64>], x: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let mut u = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&u, b);
                u.iter_mut().zip(b).for_each(|(ui, bi)| *ui -= c * bi);
            }
        }
        let n = dot(&u, &u).sqrt();
        if n > 1e-10 {
            basis.push(u.iter().map(|x| x / n).collect());
        }
    }
    let mut res = x.to_vec();
    for b in &basis {
        let c = dot(&res, b);
        res.iter_mut().zip(b).for_each(|(ri, bi)| *ri -= c * bi);
    }
    dot(&res, &res).sqrt()
}

fn row_space() -> Outcome {
    let mut rng = Rng::new(303);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = 2 + rng.below(7);
        let dk = 1 + rng.below(6);
        let (nq, nk) = (1 + rng.below(8), 1 + rng.below(d - 1));
        let (q, k, v) = (random_tensor(&mut rng, nq, d), random_tensor(&mut rng, nk, d), random_tensor(&mut rng, nk, d));
        let p = AttentionHeadParams {
            w_q: random_tensor(&mut rng, d, dk),
            w_k: random_tensor(&mut rng, d, dk),
            w_v: Tensor::identity(d),
        };
        let y = scaled_dot_attention(&q, &k, &v, &p, None, true).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = (0..nk).map(|j| v.row(j).to_vec()).collect();
        for i in 0..nq {
            worst = worst.max(span_residual(&rows, y.row(i)));
        }
    }
    check(worst < 1e-8, format!("max residual {worst:.3e} over 100 instances"))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 32,
        vocab_size: 16,
        ..ModelConfig::tiny(Arch::Thm)
    };
    let report = model_gradcheck(cfg, 7, 1e-5, Coverage::All).map_err(|e| e.to_string())?;
    let worst = report.worst().map(|p| p.name.clone()).unwrap_or_default();
    let checked: usize = report.params.iter().map(|p| p.checked).sum();
    let secs = start.elapsed().as_secs_f64();
    check(
        report.passes(1e-4) && secs < 120.0,
        format!("max rel error {:.3e} ({worst}), {checked} entries, {secs:.1}s", report.max_rel_error()),
    )
}

fn causality() -> Outcome {
    let mut rng = Rng::new(505);
    let cfg = ModelConfig {
        vocab_size: 40,
        ..ModelConfig::tiny(Arch::Thm)
    };
    let model = Model::new(cfg, 5).map_err(|e| e.to_string())?;
    let ids = |rng: &mut Rng, n: usize| -> Vec<usize> { (0..n).map(|_| NUM_SPECIALS + rng.below(36)).collect() };
    for trial in 0..50 {
        let n = 3 + rng.below(8);
        let src = IdMatrix::from_rows(&[ids(&mut rng, n)]).unwrap();
        let m = 2 + rng.below(10);
        let mut tgt = vec![BOS];
        tgt.extend(ids(&mut rng, m - 1));
        let i = rng.below(m - 1);
        let mut other = tgt.clone();
        for t in other.iter_mut().skip(i + 1) {
            *t = NUM_SPECIALS + rng.below(36);
        }
        let logits = |t: &[usize]| {
            model.logits(&src, &src, &IdMatrix::from_rows(&[t.to_vec()]).unwrap(), &mut Rng::new(0), false)
        };
        let (a, b) = (logits(&tgt).map_err(|e| e.to_string())?, logits(&other).map_err(|e| e.to_string())?);
        for p in 0..=i {
            if a.row(p) != b.row(p) {
                return Err(format!("trial {trial}: position {p} changed after perturbing positions > {i}"));
            }
        }
    }
    Ok("50 trials bit-exact".into())
}

fn parameter_ratio() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, thm, tf) in [
        ("base", ModelConfig::base(Arch::Thm), ModelConfig::base(Arch::Transformer)),
        ("big", ModelConfig::big(Arch::Thm), ModelConfig::big(Arch::Transformer)),
    ] {
        let (a, b) = (count_parameters(&thm).total(), count_parameters(&tf).total());
        let r = a as f64 / b as f64;
        ok &= (1.80..=2.05).contains(&r);
        parts.push(format!("{name} {a}/{b} = {r:.4}"));
    }
    check(ok, parts.join(", "))
}

fn copy_data(seed: u64, n_train: usize, n_eval: usize) -> ExperimentData {
    let gen = |n, s| gen_synthetic(Task::Copy, 20, n, (3, 12), &mut Rng::new(s)).unwrap();
    let train = gen(n_train, 1000 + seed);
    let dev = gen(n_eval, 2000 + seed);
    let test = gen(n_eval, 3000 + seed);
    let bpe = learn_bpe(&train, 1000).unwrap();
    ExperimentData {
        train: encode_corpus(&bpe, &train),
        dev: encode_corpus(&bpe, &dev),
        test: encode_corpus(&bpe, &test),
        bpe,
    }
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 30,
        warmup: 400,
        lr_scale: 0.7,
        token_budget: 256,
        decode_max_len: 20,
        ..TrainConfig::default()
    }
}

fn toy_convergence() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for arch in [Arch::Thm, Arch::Transformer] {
        for seed in 1..=3 {
            let data = copy_data(seed, 2000, 200);
            let model_cfg = ModelConfig {
                vocab_size: data.bpe.vocab_size(),
                ..ModelConfig::tiny(arch)
            };
            let mut t = Trainer::new(model_cfg, toy_config(seed)).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let mut reached = None;
            let (mut bleu, mut acc) = (0.0, 0.0);
            while t.state.epoch < 30 {
                let row = t.run_epoch(&data, None).map_err(|e| e.to_string())?;
                bleu = row.dev_bleu;
                acc = teacher_forced(&t.model, &data.dev, 256).map_err(|e| e.to_string())?.accuracy;
                if bleu >= 95.0 && acc >= 0.99 {
                    reached = Some(row.epoch);
                    break;
                }
            }
            let took = start.elapsed();
            let pass = reached.is_some() && took <= Duration::from_secs(600);
            ok &= pass;
            lines.push(format!(
                "{arch} seed {seed}: {} dev BLEU {bleu:.2} acc {:.2}% in {:.0}s",
                reached.map_or("not reached in 30 epochs".into(), |e| format!("epoch {e}")),
                100.0 * acc,
                took.as_secs_f64()
            ));
        }
    }
    check(ok, lines.join("; "))
}

fn corruption_statistics() -> Outcome {
    let mut rng = Rng::new(808);
    let mut fired = 0;
    let n = 10_000;
    for i in 0..n {
        let len = 2 + rng.below(11);
        let ids: Vec<usize> = if i % 2 == 0 {
            let mut v: Vec<usize> = (NUM_SPECIALS..NUM_SPECIALS + 30).collect();
            rng.shuffle(&mut v);
            v.truncate(len);
            v
        } else {
            (0..len).map(|_| NUM_SPECIALS + rng.below(3)).collect()
        };
        let out = token_swap_corrupt(&ids, 0.5, &mut rng);
        let changed = ids.iter().zip(&out).filter(|(a, b)| a != b).count();
        if changed != 0 && changed != 2 {
            return Err(format!("sequence {i}: {changed} positions changed"));
        }
        let (mut a, mut b) = (ids.clone(), out.clone());
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(format!("sequence {i}: token multiset changed"));
        }
        // Distinct tokens make every swap visible.
        if i % 2 == 0 && changed == 2 {
            fired += 1;
        }
    }
    let rate = fired as f64 / (n / 2) as f64;
    check(
        (rate - 0.5).abs() <= 0.02,
        format!("{n} sequences, 0 or 2 changes, multisets kept, swap rate {rate:.4}"),
    )
}

fn bleu_oracle() -> Outcome {
    let mut rng = Rng::new(909);
    let words = ["a", "b", "c", "d", "e"];
    let sentence = |rng: &mut Rng| -> Vec<String> {
        let n = rng.below(10);
        (0..n).map(|_| words[rng.below(words.len())].to_string()).collect()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let size = 1 + rng.below(8);
        let h: Vec<Vec<String>> = (0..size).map(|_| sentence(&mut rng)).collect();
        let r: Vec<Vec<String>> = (0..size).map(|_| sentence(&mut rng)).collect();
        let join = |v: &[Vec<String>]| v.iter().map(|s| s.join(" ")).collect::<Vec<_>>();
        let got = corpus_bleu(&join(&h), &join(&r)).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_bleu(&h, &r)).abs());
    }
    let lines = ["the cat sat on the mat", "a b c d e f", "x"];
    let identity = corpus_bleu(&lines, &lines).map_err(|e| e.to_string())?;
    check(
        worst < 1e-9 && identity == 100.0,
        format!("max diff {worst:.3e} over 20 corpora, identity {identity}"),
    )
}

fn record(dev: &[f64], test: &[f64]) -> RunRecord {
    RunRecord {
        rows: dev
            .iter()
            .zip(test)
            .enumerate()
            .map(|(i, (&d, &t))| EpochRow {
                epoch: i + 1,
                train_loss: 1.0,
                valid_loss: 1.0,
                dev_bleu: d,
                test_bleu: t,
            })
            .collect(),
    }
}

fn selection_tables() -> Outcome {
    // (dev, test, expected for k = 1, 3, 5, 10)
    let cases: [(&[f64], &[f64], [bool; 4]); 10] = [
        (&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], [true; 4]),
        (&[3.0, 1.0, 2.0], &[1.0, 3.0, 2.0], [false, true, true, true]),
        (&[1.0, 2.0, 3.0, 4.0], &[5.0; 4], [true; 4]),
        (&[5.0, 5.0, 1.0], &[2.0, 9.0, 1.0], [false, true, true, true]),
        (&[1.0, 9.0, 9.0], &[1.0, 3.0, 8.0], [false, true, true, true]),
        (&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], [false, false, false, true]),
        (&[0.0, 0.0, 7.0, 0.0], &[4.0, 4.0, 3.0, 4.0], [false, false, true, true]),
        (&[2.0, 1.0, 1.0, 1.0, 1.0], &[3.0, 5.0, 5.0, 5.0, 1.0], [false, false, true, true]),
        (&[4.0], &[0.0], [true; 4]),
        (
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0],
            &[11.0, 10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0],
            [false; 4],
        ),
    ];
    for (n, (dev, test, want)) in cases.iter().enumerate() {
        let r = record(dev, test);
        for (k, &w) in [1, 3, 5, 10].iter().zip(want) {
            let got = topk_selection(&r, *k).map_err(|e| e.to_string())?;
            if got != w {
                return Err(format!("record {}: top-{k} gave {got}, expected {w}", n + 1));
            }
        }
    }
    Ok("10 records x k in {1, 3, 5, 10}".into())
}

fn resume_equivalence() -> Outcome {
    let data = copy_data(4, 300, 30);
    let model_cfg = ModelConfig {
        vocab_size: data.bpe.vocab_size(),
        ..ModelConfig::tiny(Arch::Thm)
    };
    let cfg = TrainConfig { epochs: 4, ..toy_config(4) };
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = root.path().join("full");
    run_experiment(model_cfg, cfg.clone(), &data, &full).map_err(|e| e.to_string())?;
    let want_log = fs::read(full.join(LOSS_LOG)).map_err(|e| e.to_string())?;
    let want_ckpt = fs::read(checkpoint_path(&full, 4)).map_err(|e| e.to_string())?;
    for e in 1..cfg.epochs {
        let dir = root.path().join(format!("resumed-{e}"));
        resume(&checkpoint_path(&full, e), &data, cfg.epochs, &dir).map_err(|e| e.to_string())?;
        if fs::read(dir.join(LOSS_LOG)).map_err(|e| e.to_string())? != want_log {
            return Err(format!("loss log differs after resuming at epoch {e}"));
        }
        if fs::read(checkpoint_path(&dir, 4)).map_err(|e| e.to_string())? != want_ckpt {
            return Err(format!("final checkpoint differs after resuming at epoch {e}"));
        }
    }
    Ok(format!("resumed at epochs 1-{}, loss logs and final checkpoints bit-identical", cfg.epochs - 1))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("degradation identity", degradation_identity),
        ("non-local oracle", nonlocal_oracle),
        ("row space", row_space),
        ("gradient check", gradient_check),
        ("causality", causality),
        ("parameter-count ratio", parameter_ratio),
        ("toy-task convergence", toy_convergence),
        ("corruption statistics", corruption_statistics),
        ("BLEU oracle", bleu_oracle),
        ("selection metric", selection_tables),
        ("resume equivalence", resume_equivalence),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
