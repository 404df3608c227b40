//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-3 and 6-8 reuse the core integration suites, 4 and 5 run the
//! scaled-down pre-training experiment, 9 drives the binary twice.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use avcap::analysis::token_accuracy;
use avcap::captioner::strip_eos;
use avcap::data::{generate, split};
use avcap::train::{decode_all, evaluate_losses};
use avcap::{CaptionerModel, FusionKind, LossTriple, Modality, ModelConfig, Sample, TaskSpec, TrainConfig, Trainer};

#[allow(dead_code)]
#[path = "../../core/tests/gradcheck.rs"]
mod gradcheck;
#[allow(dead_code)]
#[path = "../../core/tests/mbp_props.rs"]
mod mbp_props;
#[allow(dead_code)]
#[path = "../../core/tests/fusion_structure.rs"]
mod fusion_structure;
#[allow(dead_code)]
#[path = "../../core/tests/decoding.rs"]
mod decoding;
#[allow(dead_code)]
#[path = "../../core/tests/metrics.rs"]
mod metrics;
#[allow(dead_code)]
#[path = "../../core/tests/data_io.rs"]
mod data_io;

const SEEDS: [u64; 3] = [0, 1, 2];

type Outcome = Result<String, String>;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn suite(checks: &[fn()]) -> Outcome {
    for check in checks {
        check();
    }
    Ok(format!("{} suite checks", checks.len()))
}

/// Shared pre-training runs: per seed, (MBP-off, MBP-on) models with their
/// final validation losses.
struct Pretrained {
    runs: Vec<[(CaptionerModel, LossTriple); 2]>,
}

fn experiment_model(spec: &TaskSpec) -> ModelConfig {
    ModelConfig {
        fusion: FusionKind::Merged,
        ffn_hidden: 128,
        fusion_layers: 1,
        decoder_layers: 1,
        vocab: spec.vocab(),
        n_audio: spec.n_audio,
        n_video: spec.n_video,
        max_caption_len: spec.caption_len + 1,
        ..ModelConfig::default()
    }
}

fn splits(spec: &TaskSpec) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let all = generate(spec, 6000).expect("generate");
    split(&all, [0.8, 0.1, 0.1]).expect("split")
}

fn pretrain_all() -> Pretrained {
    let spec = TaskSpec::default();
    let (train, val, _) = splits(&spec);
    let cfg = experiment_model(&spec);
    let runs = SEEDS
        .iter()
        .map(|&seed| {
            [false, true].map(|mbp| {
                let start = Instant::now();
                let tc = TrainConfig { lr: 5e-4, seed, mbp, mono_log_every: 0, ..TrainConfig::pretrain() };
                let mut t = Trainer::new(CaptionerModel::new(cfg, seed).unwrap(), tc, train.len()).unwrap();
                for _ in 0..tc.steps {
                    t.train_step(&train).unwrap();
                }
                let losses = evaluate_losses(&t.model, &val, 100).unwrap();
                println!(
                    "  pretrain seed {seed} mbp {}: L {:.4} L_a {:.4} L_v {:.4} ({:.0} s)",
                    if mbp { "on " } else { "off" },
                    losses.l,
                    losses.l_a,
                    losses.l_v,
                    start.elapsed().as_secs_f64()
                );
                (t.model, losses)
            })
        })
        .collect();
    Pretrained { runs }
}

fn criterion4(p: &Pretrained) -> Outcome {
    let off: Vec<&LossTriple> = p.runs.iter().map(|r| &r[0].1).collect();
    let on: Vec<&LossTriple> = p.runs.iter().map(|r| &r[1].1).collect();
    let a = off.iter().all(|l| l.l_v > l.l_a);
    let (v_off, v_on) = (median(off.iter().map(|l| l.l_v).collect()), median(on.iter().map(|l| l.l_v).collect()));
    let (av_off, av_on) = (median(off.iter().map(|l| l.l).collect()), median(on.iter().map(|l| l.l).collect()));
    let b = v_on < v_off;
    let c = av_on <= av_off + 0.05;
    let detail = format!(
        "(a) L_v > L_a without MBP in every seed: {a}; (b) median L_v {v_on:.4} with vs {v_off:.4} without: {b}; \
         (c) median L {av_on:.4} with vs {av_off:.4} without: {c}"
    );
    if a && b && c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion5(p: &Pretrained) -> Outcome {
    let spec = TaskSpec::downstream();
    let (train, _, test) = splits(&spec);
    let refs: Vec<Vec<usize>> = test.iter().map(|s| strip_eos(&s.caption).to_vec()).collect();
    let mut acc = [Vec::new(), Vec::new()];
    for (run, &seed) in p.runs.iter().zip(&SEEDS) {
        for (k, (model, _)) in run.iter().enumerate() {
            let tc = TrainConfig { seed, ..TrainConfig::finetune() };
            let mut t = Trainer::new(model.clone(), tc, train.len()).unwrap();
            for _ in 0..tc.steps {
                t.train_step(&train).unwrap();
            }
            let hyps = decode_all(&t.model, &test, Modality::Av, 1).unwrap();
            let a = token_accuracy(&hyps, &refs);
            println!("  finetune seed {seed} mbp {}: token accuracy {a:.4}", if k == 1 { "on " } else { "off" });
            acc[k].push(a);
        }
    }
    let (off, on) = (median(acc[0].clone()), median(acc[1].clone()));
    let detail = format!("median token accuracy {on:.4} with MBP vs {off:.4} without");
    if on > off {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn avcap(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_avcap")).current_dir(dir).args(args).output().expect("spawn avcap");
    assert!(out.status.success(), "avcap {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::write(dir.join("captions.txt"), "a dog barks at the mailman\nthe chef chops onions\n").unwrap();
    fs::write(dir.join("transcripts.txt"), "the dog barks loudly\nchop the onions finely\n").unwrap();
    fs::write(dir.join("audio.txt"), "a dog barks\nan engine roars\nbirds sing\n").unwrap();
    fs::write(dir.join("image.txt"), "a red car\na dog on grass\na tall tree\n").unwrap();
    let tiny = ["--dim", "16", "--heads", "2", "--ffn-hidden", "16", "--fusion-layers", "1", "--decoder-layers", "1"];
    avcap(dir, &["generate", "--n", "120", "--seed", "3", "--out", "data"]);
    let mut pre = vec!["pretrain", "--data", "data", "--out", "pre", "--steps", "8", "--fusion", "lg-cross", "--mono-log-every", "3"];
    pre.extend(tiny);
    avcap(dir, &pre);
    let mut off = vec!["pretrain", "--data", "data", "--out", "pre_off", "--steps", "6", "--mbp", "off", "--mono-log-every", "2"];
    off.extend(tiny);
    avcap(dir, &off);
    avcap(dir, &["finetune", "--checkpoint", "pre", "--data", "data", "--out", "ft", "--steps", "4"]);
    avcap(dir, &["eval", "--checkpoint", "ft", "--data", "data", "--beam", "3", "--out", "ev"]);
    avcap(dir, &["rollout", "--checkpoint", "pre", "--data", "data", "--sample", "2", "--out", "ro"]);
    avcap(dir, &["plot", "--metrics", "pre/metrics.csv", "--out", "pl"]);
    avcap(
        dir,
        &[
            "analyze", "--captions", "captions.txt", "--transcripts", "transcripts.txt", "--audio-captions", "audio.txt",
            "--image-captions", "image.txt", "--out", "an",
        ],
    );
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    files
}

fn collect(root: &Path, dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect(root, &path, files);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            files.insert(rel, fs::read(&path).unwrap());
        }
    }
}

fn criterion9() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, second) = (pipeline(a.path()), pipeline(b.path()));
    let names: Vec<&String> = first.keys().collect();
    if names != second.keys().collect::<Vec<_>>() {
        return Err(format!("file sets differ: {names:?} vs {:?}", second.keys().collect::<Vec<_>>()));
    }
    let differing: Vec<&String> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k).collect();
    if !differing.is_empty() {
        return Err(format!("outputs differ between reruns: {differing:?}"));
    }
    data_io::checkpoint_round_trip_preserves_logits_to_f32();
    Ok(format!("{} output files byte-identical across reruns; checkpoint logits within f32 rounding", first.len()))
}

fn run(n: usize, f: impl FnOnce() -> Outcome, failures: &mut Vec<usize>) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {n}: PASS ({secs:.1} s) {detail}"),
        Err(detail) => {
            println!("criterion {n}: FAIL ({secs:.1} s) {detail}");
            failures.push(n);
        }
    }
}

fn main() {
    let mut failures = Vec::new();
    run(1, || suite(&[gradcheck::every_operation_matches_finite_differences]), &mut failures);
    run(
        2,
        || {
            suite(&[
                mbp_props::targets_sum_to_one,
                mbp_props::weights_stay_normalized_through_updates,
                mbp_props::shift_invariance,
                mbp_props::strictly_monotone_in_own_gap,
                mbp_props::ema_contracts_geometrically,
                mbp_props::worked_examples,
                mbp_props::first_observation_adopts_targets,
            ])
        },
        &mut failures,
    );
    run(
        3,
        || {
            suite(&[
                fusion_structure::global_cross_locality_is_bitwise,
                fusion_structure::every_kind_emits_the_same_shape,
                fusion_structure::local_global_parameter_overhead_is_exact,
            ])
        },
        &mut failures,
    );

    let start = Instant::now();
    let pretrained = catch_unwind(pretrain_all).ok();
    println!("  pre-training finished in {:.0} s", start.elapsed().as_secs_f64());
    match &pretrained {
        Some(p) => {
            run(4, || criterion4(p), &mut failures);
            run(5, || criterion5(p), &mut failures);
        }
        None => {
            for n in [4, 5] {
                run(n, || Err("pre-training panicked".into()), &mut failures);
            }
        }
    }

    run(
        6,
        || {
            suite(&[
                decoding::width_one_beam_equals_greedy,
                decoding::wide_beam_matches_exhaustive_search,
                decoding::wide_beam_matches_exhaustive_search_on_models,
            ])
        },
        &mut failures,
    );
    run(
        7,
        || {
            suite(&[
                metrics::bleu_identity_and_disjoint,
                metrics::bleu_hand_fixture,
                metrics::bleu_matches_clean_room_oracle,
                metrics::scr_fixture,
                metrics::ars_fixture,
                metrics::ars_ordering_sanity,
            ])
        },
        &mut failures,
    );
    run(8, || suite(&[metrics::rollout_is_row_stochastic_and_equals_direct_product]), &mut failures);
    run(9, criterion9, &mut failures);

    if failures.is_empty() {
        println!("acceptance: all 9 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
