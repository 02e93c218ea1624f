//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Criteria 9 and 10 train toy models and take several minutes. Set
//! `AMODAL_ACCEPTANCE_ONLY=1,3,5` to run a subset.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use amodal_core::dataset::DatasetManifest;
use amodal_core::eval::{average_precision, oracle_ap, Detection, EvalConfig, GroundTruth};
use amodal_core::experiments::{
    amodal_scores, composition_ablation, constructed_refine_case, finetune, permuted_refine_cases, pretrain,
    prompt_type_ablation, Composition, RecipeConfig, ToyCorpus,
};
use amodal_core::filter::{compute_stats, filter_coverage, filter_manifest, filter_visibility, FilterConfig, Verdict};
use amodal_core::losses::{
    dice_loss, dice_loss_grad, focal_loss, focal_loss_grad, iou_loss, loss_and_logit_grads, sigmoid, total_loss, LossConfig,
    LossReport, MaskProbabilities,
};
use amodal_core::mask::{occlusion_rate, AmodalInstance, BinaryMask, Origin};
use amodal_core::model::{
    sample_dataset, sample_prompt, MixtureSpec, Part, Predictor, PredictorConfig, PromptMode, PromptPolicy, TrainConfig, Trainer,
    TrainingSet,
};
use amodal_core::pipeline::refine_confidence;
use amodal_core::synth::{normalize_size_with_scale, random_object, synthesize, SynthesisConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<(), String> {
    check((a - b).abs() < tol, || format!("{what}: {a} vs {b} (tol {tol})"))
}

fn probs(h: usize, w: usize, v: Vec<f64>) -> MaskProbabilities {
    MaskProbabilities::new(h, w, v).expect("valid probabilities")
}

fn criterion_1() -> Outcome {
    let e = |r: Result<f64, _>| r.map_err(|e: amodal_core::losses::LossError| e.to_string());
    let gt = BinaryMask::rect(4, 4, 0, 0, 2, 2);
    let wide = BinaryMask::rect(4, 4, 0, 0, 2, 4);
    let other = BinaryMask::rect(4, 4, 2, 2, 2, 2);
    close(e(dice_loss(&MaskProbabilities::from_mask(&gt), &gt))?, 0.0, 1e-9, "dice identity")?;
    close(e(dice_loss(&MaskProbabilities::from_mask(&other), &gt))?, 1.0, 1e-9, "dice disjoint")?;
    close(e(dice_loss(&MaskProbabilities::from_mask(&wide), &gt))?, 1.0 / 3.0, 1e-9, "dice 2h over h")?;
    let one = BinaryMask::full(1, 1);
    let half = probs(1, 1, vec![0.5]);
    close(e(focal_loss(&half, &one, 2.0, 1e-7))?, 0.25 * std::f64::consts::LN_2, 1e-9, "focal p=0.5 gamma=2")?;
    close(e(focal_loss(&half, &one, 0.0, 1e-7))?, std::f64::consts::LN_2, 1e-9, "focal p=0.5 gamma=0")?;
    let eps = 1e-7;
    let near = probs(4, 4, wide.bits().iter().map(|&g| if g { 1.0 - eps } else { eps }).collect());
    let f = e(focal_loss(&near, &wide, 2.0, 1e-7))?;
    check(f < 1e-6, || format!("focal near-perfect {f}"))?;
    close(e(iou_loss(1.0, &gt, &gt))?, 0.0, 1e-9, "iou loss exact")?;
    close(e(iou_loss(0.7, &wide, &gt))?, 0.2, 1e-9, "iou loss 0.7 vs 0.5")?;
    close(e(iou_loss(0.0, &gt, &gt))?, 1.0, 1e-9, "iou loss zero estimate")?;

    // finite differences on random 8x8 cases, with respect to probabilities and logits
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = LossConfig::default();
    let rel = |fd: f64, an: f64| (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6);
    let h = 1e-6;
    let mut cases = 0;
    for case in 0..100 {
        let gt = BinaryMask::from_bits(8, 8, (0..64).map(|_| rng.random_bool(0.4)).collect()).expect("64 bits");
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.02..0.98)).collect();
        let pm = probs(8, 8, p.clone());
        let dd = dice_loss_grad(&pm, &gt).map_err(|e| e.to_string())?;
        let fg = focal_loss_grad(&pm, &gt, cfg.gamma, cfg.probability_floor).map_err(|e| e.to_string())?;
        let z: Vec<f64> = p.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
        let lg = loss_and_logit_grads(&z, 0.1, &gt, &cfg).map_err(|e| e.to_string())?;
        for i in 0..64 {
            let at = |d: f64| {
                let mut q = p.clone();
                q[i] += d;
                probs(8, 8, q)
            };
            let fd = (dice_loss(&at(h), &gt).unwrap() - dice_loss(&at(-h), &gt).unwrap()) / (2.0 * h);
            check(rel(fd, dd[i]), || format!("case {case} pixel {i}: dice fd {fd} vs {}", dd[i]))?;
            let ff = |q: &MaskProbabilities| focal_loss(q, &gt, cfg.gamma, cfg.probability_floor).unwrap();
            let fd = (ff(&at(h)) - ff(&at(-h))) / (2.0 * h);
            check(rel(fd, fg[i]), || format!("case {case} pixel {i}: focal fd {fd} vs {}", fg[i]))?;
            let smooth = |d: f64| {
                let mut zz = z.clone();
                zz[i] += d;
                let q = probs(8, 8, zz.iter().map(|&v| sigmoid(v)).collect());
                dice_loss(&q, &gt).unwrap() + focal_loss(&q, &gt, cfg.gamma, cfg.probability_floor).unwrap()
            };
            let hz = 1e-5;
            let fd = (smooth(hz) - smooth(-hz)) / (2.0 * hz);
            check(rel(fd, lg.mask_logits[i]), || format!("case {case} pixel {i}: logit fd {fd} vs {}", lg.mask_logits[i]))?;
        }
        cases += 1;
    }
    Ok(format!("golden values exact; {cases} random 8x8 gradient cases within 1e-4 relative"))
}

fn criterion_2() -> Outcome {
    let r = LossReport::compose(0.3, 0.1, 0.2, 0.05);
    close(r.total, 0.41, 1e-12, "(0.3, 0.1, 0.2)")?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = LossConfig::default();
    check(cfg.lambda_iou == 0.05, || format!("default lambda {}", cfg.lambda_iou))?;
    for _ in 0..200 {
        let gt = BinaryMask::from_bits(8, 8, (0..64).map(|_| rng.random_bool(0.5)).collect()).expect("64 bits");
        let p = probs(8, 8, (0..64).map(|_| rng.random_range(0.0..=1.0)).collect());
        let rho = rng.random_range(0.0..=1.0);
        let t = total_loss(&p, &gt, rho, &cfg).map_err(|e| e.to_string())?;
        let d = dice_loss(&p, &gt).unwrap();
        let f = focal_loss(&p, &gt, cfg.gamma, cfg.probability_floor).unwrap();
        let i = iou_loss(rho, &p.threshold(0.5), &gt).unwrap();
        close(t.total, d + f + 0.05 * i, 1e-12, "total")?;
    }
    Ok("total = dice + focal + 0.05 iou to 1e-12 on 200 random cases".into())
}

fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruth>) {
    let rect = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0..10), rng.random_range(0..10));
        BinaryMask::rect(12, 12, x, y, rng.random_range(1..=5), rng.random_range(1..=5))
    };
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    for image_id in 0..rng.random_range(1..=5u64) {
        for _ in 0..rng.random_range(0..=10) {
            gts.push(GroundTruth { image_id, mask: rect(rng), category: None });
        }
        for _ in 0..rng.random_range(0..=10) {
            let score = rng.random_range(0..6) as f64 / 5.0;
            dets.push(Detection { image_id, mask: rect(rng), score, category: None });
        }
    }
    (dets, gts)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = EvalConfig::default();
    let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-9,
        (None, None) => true,
        _ => false,
    };
    for k in 0..500 {
        let (dets, gts) = random_scene(&mut rng);
        let a = average_precision(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
        let o = oracle_ap(&dets, &gts, &cfg).map_err(|e| e.to_string())?;
        for (x, y, what) in [(a.ap, o.ap, "AP"), (a.ap50, o.ap50, "AP50"), (a.ap75, o.ap75, "AP75"), (a.ar, o.ar, "AR")] {
            check(same(x, y), || format!("scene {k}: {what} {x:?} vs oracle {y:?}"))?;
        }
    }
    let g = BinaryMask::rect(32, 32, 0, 0, 10, 10);
    let d = BinaryMask::rect(32, 32, 0, 0, 10, 6);
    close(d.iou(&g).unwrap(), 0.6, 1e-12, "fixture IoU")?;
    let r = average_precision(
        &[Detection { image_id: 1, mask: d, score: 0.9, category: None }],
        &[GroundTruth { image_id: 1, mask: g, category: None }],
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    check(r.ap50 == Some(100.0) && r.ap75 == Some(0.0), || format!("IoU 0.6 case: AP50 {:?} AP75 {:?}", r.ap50, r.ap75))?;
    Ok("500 random scenes agree with the oracle to 1e-9; IoU 0.6 case gives AP50 100, AP75 0".into())
}

fn argsort_desc(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for k in 0..1000 {
        let n = rng.random_range(1..=20);
        let front: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let iou: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let c: f64 = rng.random_range(0.01..=1.0);
        let refined: Vec<f64> = front.iter().zip(&iou).map(|(&s, &i)| refine_confidence(s, i).unwrap()).collect();
        for j in 0..n {
            check(refined[j] == front[j] * iou[j], || format!("vector {k}: refined is not the product"))?;
        }
        let scaled: Vec<f64> = front.iter().zip(&iou).map(|(&s, &i)| refine_confidence(c * s, i).unwrap()).collect();
        check(argsort_desc(&refined) == argsort_desc(&scaled), || format!("vector {k}: order changed under scale {c}"))?;
    }
    Ok("refined score is the exact product; ranking unchanged under rescaling on 1000 vectors".into())
}

fn criterion_5() -> Outcome {
    let cfg = SynthesisConfig { pairs: 1000, seed: 5, ..Default::default() };
    let out = synthesize(&cfg).map_err(|e| e.to_string())?;
    let m = &out.manifest;
    for a in &m.annotations {
        let inst = a.to_instance().map_err(|e| e.to_string())?;
        check(inst.modal_mask.is_subset_of(&inst.amodal_mask).unwrap(), || format!("annotation {}: modal not inside amodal", a.id))?;
    }
    let stats = compute_stats(m).map_err(|e| e.to_string())?;
    check(stats.poi == 50.0, || format!("POI {}", stats.poi))?;
    let r = &out.report;
    check(r.emitted_pairs + r.skipped.len() == 1000, || "pairs unaccounted for".into())?;
    check(r.emitted_pairs >= 990, || format!("only {} of 1000 pairs emitted", r.emitted_pairs))?;
    // achieved ROR recomputed from the written masks
    let by_key: std::collections::HashMap<u64, f64> = r.samples.iter().map(|s| (s.pair_key, s.requested_ror)).collect();
    let mut worst: f64 = 0.0;
    let mut sum = 0.0;
    for a in m.annotations.iter().filter(|a| a.origin == Origin::SyntheticOccluded) {
        let ror = occlusion_rate(&a.to_instance().unwrap()).unwrap();
        let req = by_key[&a.pair_key.expect("synthesized annotations carry a pair key")];
        worst = worst.max((ror - req).abs());
        sum += ror;
    }
    check(worst <= 0.02, || format!("ROR deviation {worst}"))?;
    let mean = sum / r.emitted_pairs as f64;
    check((0.30..=0.40).contains(&mean), || format!("mean ROR {mean}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_px: f64 = 0.0;
    for k in 0..1000 {
        let occ = random_object((2, 80), k, &mut rng);
        let target = rng.random_range(4..60);
        let s = rng.random_range(0.5..1.5);
        let n = normalize_size_with_scale(&occ, target, s).map_err(|e| e.to_string())?;
        let f = target as f64 * s / occ.long_side() as f64;
        worst_px = worst_px.max((n.width() as f64 - occ.width() as f64 * f).abs());
        worst_px = worst_px.max((n.height() as f64 - occ.height() as f64 * f).abs());
    }
    check(worst_px <= 1.0, || format!("aspect deviation {worst_px} px"))?;
    Ok(format!(
        "{} pairs emitted ({} infeasible skipped), POI {}, max ROR error {worst:.4}, mean ROR {mean:.3}, max aspect error {worst_px:.2} px",
        r.emitted_pairs,
        r.skipped.len(),
        stats.poi
    ))
}

fn instance(modal: BinaryMask, amodal: BinaryMask) -> AmodalInstance {
    AmodalInstance::new(0, modal, amodal, None, Origin::Real).expect("valid instance")
}

fn criterion_6() -> Outcome {
    let amodal = BinaryMask::rect(20, 20, 0, 0, 10, 10);
    let vis = |n: i64| instance(BinaryMask::rect(20, 20, 0, 0, n, 1), amodal.clone());
    let v05 = filter_visibility(&vis(5), 0.10).map_err(|e| e.to_string())?;
    let v10 = filter_visibility(&vis(10), 0.10).map_err(|e| e.to_string())?;
    check(!v05.is_keep() && v10 == Verdict::Keep, || format!("visibility 0.05 -> {v05:?}, 0.10 -> {v10:?}"))?;
    let cov = |n: i64| {
        let m = BinaryMask::rect(10, 10, 0, 0, 10, n);
        let m = BinaryMask::from_fn(10, 10, |x, y| m.get(x, y) || (y as i64 == n && x < 5));
        instance(m.clone(), m)
    };
    let c95 = filter_coverage(&cov(9), (10, 10), 0.90).map_err(|e| e.to_string())?;
    let c90 = filter_coverage(&instance(BinaryMask::rect(10, 10, 0, 0, 10, 9), BinaryMask::rect(10, 10, 0, 0, 10, 9)), (10, 10), 0.90)
        .map_err(|e| e.to_string())?;
    check(!c95.is_keep() && c90 == Verdict::Keep, || format!("coverage 0.95 -> {c95:?}, 0.90 -> {c90:?}"))?;

    let base = synthesize(&SynthesisConfig { pairs: 100, seed: 6, ..Default::default() }).map_err(|e| e.to_string())?.manifest;
    let cfg = FilterConfig { min_visible_ratio: 0.5, ..Default::default() };
    let kept_ids = |m: &DatasetManifest| -> Result<BTreeSet<u64>, String> {
        Ok(filter_manifest(m, &cfg).map_err(|e| e.to_string())?.0.annotations.iter().map(|a| a.id).collect())
    };
    let reference = kept_ids(&base)?;
    check(reference.len() < base.annotations.len(), || "permutation test needs some drops".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    for _ in 0..20 {
        let mut m = base.clone();
        for i in (1..m.annotations.len()).rev() {
            m.annotations.swap(i, rng.random_range(0..=i));
        }
        check(kept_ids(&m)? == reference, || "kept set depends on annotation order".into())?;
    }
    Ok(format!(
        "0.05 visible and 0.95 coverage dropped, 0.10 and 0.90 kept; kept set ({} of {}) stable under 20 permutations",
        reference.len(),
        base.annotations.len()
    ))
}

fn criterion_7() -> Outcome {
    let mix = MixtureSpec::new(&[10, 100]).map_err(|e| e.to_string())?;
    close(mix.weights()[0], 1.0 / 3.0, 1e-12, "closed-form weight")?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let first = (0..n).filter(|_| sample_dataset(&mix, &mut rng) == 0).count() as f64 / n as f64;
    check((first - 1.0 / 3.0).abs() <= 0.01, || format!("dataset frequency {first}"))?;
    let amodal = BinaryMask::rect(32, 32, 4, 4, 20, 10);
    let modal = BinaryMask::rect(32, 32, 4, 4, 8, 10);
    let inst = instance(modal, amodal);
    let modal_box = inst.modal_box.expect("visible");
    let policy = PromptPolicy::fixed(PromptMode::Random);
    let m = 10_000;
    let hits = (0..m).filter(|_| sample_prompt(&inst, &policy, &mut rng) == modal_box).count() as f64 / m as f64;
    check((hits - 0.5).abs() <= 0.02, || format!("modal prompt fraction {hits}"))?;
    Ok(format!("dataset frequencies {first:.4} / {:.4}; modal prompt fraction {hits:.4}", 1.0 - first))
}

fn small_set(seed: u64, pairs: usize) -> Result<TrainingSet, String> {
    let out = synthesize(&SynthesisConfig { pairs, seed, ..Default::default() }).map_err(|e| e.to_string())?;
    out.training_set("small").map_err(|e| e.to_string())
}

fn criterion_8() -> Outcome {
    let set = small_set(8, 16)?;
    let model = Predictor::new(PredictorConfig { seed: 8, ..Default::default() }).map_err(|e| e.to_string())?;
    let before: Vec<String> = Part::ALL.iter().map(|&p| model.checksum(p)).collect();
    let cfg = TrainConfig { learning_rate: 1e-3, batch_size: 4, iterations: 100, ..Default::default() };
    let mut t = Trainer::new(model, cfg, PromptPolicy::default(), 8).map_err(|e| e.to_string())?;
    let mix = MixtureSpec::new(&[set.num_instances() as u64]).map_err(|e| e.to_string())?;
    t.run(std::slice::from_ref(&set), &mix, 100).map_err(|e| e.to_string())?;
    let after: Vec<String> = Part::ALL.iter().map(|&p| t.model.checksum(p)).collect();
    check(after[0] == before[0], || "encoder changed".into())?;
    check(after[1] == before[1], || "prompt encoder changed".into())?;
    check(after[2] != before[2], || "decoder did not train".into())?;
    Ok(format!("encoder {} and prompt encoder {} unchanged after 100 decoder-only steps", &after[0][..12], &after[1][..12]))
}

/// Trained once and shared by criteria 9 and 10.
struct Toy {
    cfg: RecipeConfig,
    corpus: ToyCorpus,
    pretrained: Predictor,
}

fn toy() -> Result<Toy, String> {
    // 1000 pairs give 2000 training images; 200 held-out pairs give 200 occluded test instances
    let cfg = RecipeConfig { seed: 9, train_pairs: 1000, test_pairs: 200, ..Default::default() };
    let corpus = ToyCorpus::generate(&cfg).map_err(|e| e.to_string())?;
    let train = corpus.train.training_set("train").map_err(|e| e.to_string())?;
    let pretrained = pretrain(&train, &cfg).map_err(|e| e.to_string())?;
    Ok(Toy { cfg, corpus, pretrained })
}

fn criterion_9(toy: &Toy) -> Outcome {
    let train = toy.corpus.train.training_set("train").map_err(|e| e.to_string())?;
    let test = toy.corpus.test.training_set("test").map_err(|e| e.to_string())?;
    let t = finetune(&toy.pretrained, &train, PromptPolicy::default(), &toy.cfg, toy.cfg.seed + 1).map_err(|e| e.to_string())?;
    let s = amodal_scores(&t.model, &test).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} occluded held-out instances: amodal IoU {:.3} (amodal-box {:.3}, modal-box {:.3}) vs copy-visible {:.3}",
        s.instances, s.mean_iou, s.amodal_prompt_iou, s.modal_prompt_iou, s.copy_visible_iou
    );
    check(s.instances >= 200, || format!("{detail}; too few instances"))?;
    check(s.mean_iou >= 0.80, || format!("{detail}; below 0.80"))?;
    check(s.mean_iou >= s.copy_visible_iou + 0.10, || format!("{detail}; margin below 0.10"))?;
    Ok(detail)
}

fn criterion_10a() -> Outcome {
    let adv = constructed_refine_case().map_err(|e| e.to_string())?;
    let (f, r) = (adv.ap_front.unwrap_or(0.0), adv.ap_refined.unwrap_or(0.0));
    check(r > f, || format!("adversarial ordering: refined {r} vs front {f}"))?;
    for row in permuted_refine_cases().map_err(|e| e.to_string())? {
        let (pf, pr) = (row.ap_front.unwrap_or(0.0), row.ap_refined.unwrap_or(0.0));
        check(pr >= pf, || format!("{}: refined {pr} < front {pf}", row.case))?;
    }
    Ok(format!("adversarial case AP {f:.2} -> {r:.2}; no decrease under any of 6 score orderings"))
}

fn criterion_10b(toy: &Toy) -> Outcome {
    let rows = prompt_type_ablation(&toy.pretrained, &toy.corpus, &toy.cfg).map_err(|e| e.to_string())?;
    let random = rows.iter().find(|r| r.policy == PromptMode::Random).expect("random row").scores.mean_iou;
    let mut detail = Vec::new();
    for r in &rows {
        detail.push(format!("{} {:.4}", r.policy.name(), r.scores.mean_iou));
    }
    let detail = format!("mean of amodal- and modal-box IoU: {}", detail.join(", "));
    for r in rows.iter().filter(|r| r.policy != PromptMode::Random) {
        check(random >= r.scores.mean_iou - 0.02, || format!("{detail}; random trails {}", r.policy.name()))?;
    }
    Ok(detail)
}

fn criterion_10c(toy: &Toy) -> Outcome {
    let rows = composition_ablation(&toy.pretrained, &toy.corpus, &toy.cfg).map_err(|e| e.to_string())?;
    let get = |c| rows.iter().find(|r| r.composition == c).expect("row");
    let (mixed, occ) = (get(Composition::Mixed), get(Composition::OccludedOnly));
    let detail = format!(
        "leakage on {} front objects: occluded-only {:.4} vs mixed {:.4} (foreground IoU {:.3} vs {:.3})",
        mixed.probes, occ.leakage, mixed.leakage, occ.foreground_iou, mixed.foreground_iou
    );
    check(occ.leakage > mixed.leakage, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let only: Option<BTreeSet<String>> =
        std::env::var("AMODAL_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.contains(id) || o.contains(id.trim_end_matches(char::is_alphabetic)));
    let mut failures = 0;
    let mut report = |id: &str, limit: Duration, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let mut result = f();
        let took = start.elapsed();
        if result.is_ok() && took > limit {
            result = Err(format!("took {took:.1?}, limit {limit:?}"));
        }
        match result {
            Ok(detail) => println!("criterion {id}: PASS ({:.1}s) {detail}", took.as_secs_f64()),
            Err(detail) => {
                failures += 1;
                println!("criterion {id}: FAIL ({:.1}s) {detail}", took.as_secs_f64());
            }
        }
    };
    let min = |m: u64| Duration::from_secs(60 * m);
    report("1", min(1), &mut criterion_1);
    report("2", min(1), &mut criterion_2);
    report("3", min(5), &mut criterion_3);
    report("4", min(1), &mut criterion_4);
    report("5", min(10), &mut criterion_5);
    report("6", min(1), &mut criterion_6);
    report("7", min(1), &mut criterion_7);
    report("8", min(5), &mut criterion_8);
    report("10a", min(1), &mut criterion_10a);

    if ["9", "10b", "10c"].iter().any(|id| wanted(id)) {
        let start = Instant::now();
        match toy() {
            Ok(toy) => {
                let pre = start.elapsed();
                println!("toy model pretrained in {:.1}s", pre.as_secs_f64());
                report("9", min(30) - pre, &mut || criterion_9(&toy));
                report("10b", min(30) - pre, &mut || criterion_10b(&toy));
                report("10c", min(30) - pre, &mut || criterion_10c(&toy));
            }
            Err(e) => {
                for id in ["9", "10b", "10c"] {
                    report(id, min(30), &mut || Err(format!("toy setup failed: {e}")));
                }
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
