//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all: `cargo test --release -p adjvid-cli --test acceptance`
//! Run some: `cargo test --release -p adjvid-cli --test acceptance -- 1 4 9`

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use adjvid_core::autograd::Tape;
use adjvid_core::background::{bilinear_sample, BackgroundAlignment, OFFSET_CHANNELS};
use adjvid_core::contrastive::{info_nce, info_nce_grad};
use adjvid_core::conv::{conv2d_forward, ConvGeom};
use adjvid_core::dataset::{
    generate_dataset, generate_sequence, motion_iou, speed_histogram, PixelBox, SpeedBins, SynthesisParams,
    TrackBox, VideoSequence,
};
use adjvid_core::detection::{detection_loss, detection_loss_grad, render_targets, Detection, DetectorOutputs, Grid};
use adjvid_core::evaluation::{match_detections, precision_recall_f1, Counts, MatchCriterion};
use adjvid_core::nn::ParamStore;
use adjvid_core::pipeline::{
    build_pairs, image_to_tensor, infer_frame, infer_video, load_checkpoint, save_checkpoint, BaseTrainer, Config,
    Model, Trainer,
};
use adjvid_core::temporal::{align, masked_channel_pool, BinaryMask, MaskSource};
use adjvid_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

fn desk_config() -> Config {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    Config::load(Some(&path), &[]).expect("desk config parses")
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    loop {
        let data: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        if data.iter().any(|&v| v == 1.0) {
            return BinaryMask::new(h, w, data, MaskSource::GroundTruth).unwrap();
        }
    }
}

// ---------------------------------------------------------------- 1

fn pool_oracle(f: &Tensor, s: usize, m: &BinaryMask) -> Vec<f64> {
    let (_, c, h, w) = f.dims4();
    (0..c)
        .map(|ch| {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    if m.data[y * w + x] == 1.0 {
                        num += f.at4(s, ch, y, x);
                        den += 1.0;
                    }
                }
            }
            num / den
        })
        .collect()
}

fn bilinear_oracle(f: &Tensor, y: f64, x: f64, ch: usize, s: usize) -> f64 {
    // tent-kernel sum over the whole grid
    let (_, _, h, w) = f.dims4();
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (y - i as f64).abs()).max(0.0) * (1.0 - (x - j as f64).abs()).max(0.0);
            v += k * f.at4(s, ch, i, j);
        }
    }
    v
}

fn motion_oracle(seq: &VideoSequence, window: usize) -> Vec<(u32, usize, f64)> {
    let mut out = Vec::new();
    let mut tracks: Vec<u32> = seq.annotations.iter().flatten().map(|b| b.track).collect();
    tracks.sort_unstable();
    tracks.dedup();
    for tr in tracks {
        let find = |t: usize| seq.annotations[t].iter().find(|b| b.track == tr).map(|b| b.bbox);
        let present = (0..seq.len()).filter(|&t| find(t).is_some()).count();
        if present < 2 {
            continue;
        }
        for t in 0..seq.len() {
            let Some(a) = find(t) else { continue };
            let mut ious = Vec::new();
            for u in 0..seq.len() {
                if u != t && (u as i64 - t as i64).unsigned_abs() as usize <= window {
                    if let Some(b) = find(u) {
                        let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0) as f64;
                        let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0) as f64;
                        let inter = iw * ih;
                        ious.push(inter / ((a.area() + b.area()) as f64 - inter));
                    }
                }
            }
            if !ious.is_empty() {
                out.push((tr, t, ious.iter().sum::<f64>() / ious.len() as f64));
            }
        }
    }
    out
}

fn match_oracle(preds: &[Detection], gts: &[Detection], crit: MatchCriterion) -> Vec<Option<usize>> {
    // repeatedly take the best remaining prediction (lowest index on ties)
    let mut done = vec![false; preds.len()];
    let mut used = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for _ in 0..preds.len() {
        let mut pick = None;
        for i in 0..preds.len() {
            if !done[i] && pick.map_or(true, |p: usize| preds[i].score > preds[p].score) {
                pick = Some(i);
            }
        }
        let p = pick.unwrap();
        done[p] = true;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let (x1, y1, x2, y2) = gt.corners();
            let (px, py) = (preds[p].cx, preds[p].cy);
            let ok = match crit {
                MatchCriterion::CenterInBox => px >= x1 && px < x2 && py >= y1 && py < y2,
                MatchCriterion::Iou(t) => preds[p].iou(gt) >= t,
            };
            if ok && !used[g] {
                let iou = preds[p].iou(gt);
                if best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 25;
    let mut worst = [0.0f64; 3];
    let mut mismatches = 0;
    for _ in 0..n {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(2..7), rng.gen_range(2..7));
        let f = rand_tensor(&mut rng, &[2, c, h, w]);
        let m = rand_mask(&mut rng, h, w);
        let s = rng.gen_range(0..2);
        let got = masked_channel_pool(&f, s, &m).unwrap();
        for (a, b) in got.iter().zip(pool_oracle(&f, s, &m)) {
            worst[0] = worst[0].max((a - b).abs());
        }
        for _ in 0..10 {
            let y = rng.gen_range(-1.5..h as f64 + 0.5);
            let x = rng.gen_range(-1.5..w as f64 + 0.5);
            let ch = rng.gen_range(0..c);
            let d = (bilinear_sample(&f, y, x, ch, s) - bilinear_oracle(&f, y, x, ch, s)).abs();
            worst[1] = worst[1].max(d);
        }
        let params = SynthesisParams {
            frames: rng.gen_range(2..25),
            targets: rng.gen_range(1..4),
            max_speed: rng.gen_range(0.0..6.0),
            seed: rng.gen(),
            ..SynthesisParams::default()
        };
        let mut seq = generate_sequence("o", &params).unwrap();
        // knock out some boxes so tracks have gaps
        for boxes in &mut seq.annotations {
            boxes.retain(|_| rng.gen_bool(0.8));
        }
        let window = rng.gen_range(1..12);
        let got = motion_iou(&seq, window);
        let want = motion_oracle(&seq, window);
        if got.len() != want.len() {
            mismatches += 1;
        }
        for (g, (tr, t, v)) in got.iter().zip(want) {
            if (g.track, g.frame) != (tr, t) {
                mismatches += 1;
            }
            worst[2] = worst[2].max((g.score - v).abs());
        }
        let rand_det = |rng: &mut ChaCha8Rng| {
            let x1 = rng.gen_range(0.0..20.0);
            let y1 = rng.gen_range(0.0..20.0);
            Detection::from_corners(x1, y1, x1 + rng.gen_range(1.0..10.0), y1 + rng.gen_range(1.0..10.0), rng.gen_range(0.0..1.0))
        };
        let preds: Vec<Detection> = (0..rng.gen_range(0..8)).map(|_| rand_det(&mut rng)).collect();
        let gts: Vec<Detection> = (0..rng.gen_range(0..6)).map(|_| rand_det(&mut rng)).collect();
        for crit in [MatchCriterion::CenterInBox, MatchCriterion::Iou(0.3)] {
            let m = match_detections(&preds, &gts, crit);
            if m.pred_matches != match_oracle(&preds, &gts, crit) {
                mismatches += 1;
            }
        }
    }
    let ok = worst.iter().all(|&d| d <= 1e-6) && mismatches == 0;
    (
        ok,
        format!(
            "{n} instances; max |diff| pool {:.1e}, bilinear {:.1e}, motion_iou {:.1e}; matching mismatches {mismatches}",
            worst[0], worst[1], worst[2]
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut zero_err, mut shift_err) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let c = rng.gen_range(1..5);
        let (h, w) = (rng.gen_range(5..9), rng.gen_range(5..9));
        let mut store = ParamStore::new();
        let bda = BackgroundAlignment::new(&mut store, rng.gen(), "bda", c);
        let x = rand_tensor(&mut rng, &[2, c, h, w]);
        let weight = store.get(bda.weight).clone();
        let bias = store.get(bda.bias).clone();
        let run = |offset: &Tensor| {
            let mut tape = Tape::new();
            let params = store.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let dv = tape.leaf(offset.clone());
            let out = bda.deformable_align(&mut tape, &params, xv, dv).unwrap();
            tape.value(out).clone()
        };
        let (conv, _) = conv2d_forward(&x, &weight, Some(&bias), ConvGeom::new(3, 1, 1));
        zero_err = zero_err.max(run(&Tensor::zeros(&[2, OFFSET_CHANNELS, h, w])).max_abs_diff(&conv));

        let (dy, dx) = (rng.gen_range(-1i64..=1), rng.gen_range(-1i64..=1));
        let mut off = Tensor::zeros(&[2, OFFSET_CHANNELS, h, w]);
        for s in 0..2 {
            for k in 0..9 {
                for i in 0..h * w {
                    off.sample_mut(s)[2 * k * h * w + i] = dy as f64;
                    off.sample_mut(s)[(2 * k + 1) * h * w + i] = dx as f64;
                }
            }
        }
        // shifted-conv oracle: out(y, x) = conv(y + dy, x + dx)
        let got = run(&off);
        for s in 0..2 {
            for o in 0..c {
                for y in 2..h - 2 {
                    for x in 2..w - 2 {
                        let want = conv.at4(s, o, (y as i64 + dy) as usize, (x as i64 + dx) as usize);
                        shift_err = shift_err.max((got.at4(s, o, y, x) - want).abs());
                    }
                }
            }
        }
    }
    (
        zero_err <= 1e-5 && shift_err <= 1e-5,
        format!("20 instances; zero-offset max |diff| {zero_err:.1e}, integer-shift interior max |diff| {shift_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

const FD_STEP: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(x: &Tensor, f: &mut dyn FnMut(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += FD_STEP;
            let up = f(&p);
            p.data_mut()[i] -= 2.0 * FD_STEP;
            let down = f(&p);
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn fta_check(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (4, 4, 5);
    let anchor = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(0.1..1.0));
    let reference = Tensor::from_fn(&[2, c, h, w], |_| rng.gen_range(0.1..1.0));
    let masks = vec![rand_mask(rng, h, w), rand_mask(rng, h, w)];
    let probe = rand_tensor(rng, &[2, c, h, w]);
    let eval = |a: &Tensor, r: &Tensor, grads: bool| {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let rv = tape.leaf(r.clone());
        let out = align(&mut tape, av, rv, &masks, true).unwrap();
        let loss = tape.dot(out.enhanced, &probe);
        let value = tape.value(loss).data()[0];
        if grads {
            let mut g = tape.backward(loss);
            (value, g.take(av).map(Tensor::into_data), g.take(rv).map(Tensor::into_data))
        } else {
            (value, None, None)
        }
    };
    let (_, ga, gr) = eval(&anchor, &reference, true);
    let na = numeric_grad(&anchor, &mut |a| eval(a, &reference, false).0);
    let nr = numeric_grad(&reference, &mut |r| eval(&anchor, r, false).0);
    rel_err(&ga.unwrap(), &na).max(rel_err(&gr.unwrap(), &nr))
}

fn bda_check(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (3, 5, 5);
    let mut store = ParamStore::new();
    let bda = BackgroundAlignment::new(&mut store, 5, "bda", c);
    // non-zero field projection so offsets are fractional
    let fw = bda.field_proj.weight;
    *store.get_mut(fw) = Tensor::from_fn(store.get(fw).shape(), |_| rng.gen_range(-0.6..0.6));
    let fb = bda.field_proj.bias;
    *store.get_mut(fb) = Tensor::from_fn(store.get(fb).shape(), |_| rng.gen_range(-0.4..0.4));
    let enhanced = rand_tensor(rng, &[1, c, h, w]);
    let reference = rand_tensor(rng, &[1, c, h, w]);
    let probe = rand_tensor(rng, &[1, c, h, w]);
    let ids = [bda.weight, fw];
    let eval = |store: &ParamStore, e: &Tensor, r: &Tensor| {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let ev = tape.leaf(e.clone());
        let rv = tape.leaf(r.clone());
        let out = bda.forward(&mut tape, &params, ev, rv).unwrap();
        let loss = tape.dot(out, &probe);
        let v = tape.value(loss).data()[0];
        let mut g = tape.backward(loss);
        let mut grads = vec![g.take(ev).unwrap().into_data(), g.take(rv).unwrap().into_data()];
        for id in ids {
            grads.push(g.take(params.var(id)).unwrap().into_data());
        }
        (v, grads)
    };
    let (_, analytic) = eval(&store, &enhanced, &reference);
    let mut worst = 0.0f64;
    worst = worst.max(rel_err(&analytic[0], &numeric_grad(&enhanced, &mut |e| eval(&store, e, &reference).0)));
    worst = worst.max(rel_err(&analytic[1], &numeric_grad(&reference, &mut |r| eval(&store, &enhanced, r).0)));
    for (k, id) in ids.into_iter().enumerate() {
        let base = store.get(id).clone();
        let num = numeric_grad(&base, &mut |p| {
            let mut s = store.clone();
            *s.get_mut(id) = p.clone();
            eval(&s, &enhanced, &reference).0
        });
        worst = worst.max(rel_err(&analytic[2 + k], &num));
    }
    worst
}

fn info_nce_check(rng: &mut ChaCha8Rng) -> f64 {
    let c = 6;
    let mut v = |_: usize| -> Vec<f64> { (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let q = v(0);
    let p = v(1);
    let negs: Vec<Vec<f64>> = (0..3).map(&mut v).collect();
    let tau = 0.5;
    let loss = |q: &[f64], p: &[f64], n: &[Vec<f64>]| {
        let refs: Vec<&[f64]> = n.iter().map(Vec::as_slice).collect();
        info_nce(q, p, &refs, tau)
    };
    let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let g = info_nce_grad(&q, &p, &refs, tau);
    let fd = |x: &[f64], f: &dyn Fn(&[f64]) -> f64| -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                a[i] += FD_STEP;
                let up = f(&a);
                a[i] -= 2.0 * FD_STEP;
                (up - f(&a)) / (2.0 * FD_STEP)
            })
            .collect()
    };
    let mut worst = rel_err(&g.query, &fd(&q, &|x| loss(x, &p, &negs)));
    worst = worst.max(rel_err(&g.positive, &fd(&p, &|x| loss(&q, x, &negs))));
    for k in 0..negs.len() {
        let num = fd(&negs[k], &|x| {
            let mut n = negs.clone();
            n[k] = x.to_vec();
            loss(&q, &p, &n)
        });
        worst = worst.max(rel_err(&g.negatives[k], &num));
    }
    worst
}

fn detection_check(rng: &mut ChaCha8Rng) -> f64 {
    let grid = Grid::new(6, 6, 4);
    let boxes = vec![
        vec![Detection::new(9.0, 10.0, 8.0, 6.0, 1.0)],
        vec![Detection::new(14.5, 7.0, 6.0, 9.0, 1.0), Detection::new(5.0, 18.0, 5.0, 5.0, 1.0)],
    ];
    let targets = render_targets(&boxes, grid).unwrap();
    let out = DetectorOutputs {
        heatmap: Tensor::from_fn(&[2, 1, 6, 6], |_| rng.gen_range(0.05..0.95)),
        size: Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(0.0..4.0)),
        offset: Tensor::from_fn(&[2, 2, 6, 6], |_| rng.gen_range(0.0..1.0)),
    };
    let weights = Config::default().detection.weights();
    let (_, g) = detection_loss_grad(&out, &targets, weights).unwrap();
    let total = |o: &DetectorOutputs| detection_loss(o, &targets, weights).unwrap().total;
    let h = numeric_grad(&out.heatmap, &mut |t| total(&DetectorOutputs { heatmap: t.clone(), ..out.clone() }));
    let s = numeric_grad(&out.size, &mut |t| total(&DetectorOutputs { size: t.clone(), ..out.clone() }));
    let o = numeric_grad(&out.offset, &mut |t| total(&DetectorOutputs { offset: t.clone(), ..out.clone() }));
    rel_err(g.heatmap.data(), &h)
        .max(rel_err(g.size.data(), &s))
        .max(rel_err(g.offset.data(), &o))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let checks: [(&str, f64); 4] = [
        ("fta_fuse+alpha", fta_check(&mut rng)),
        ("bda", bda_check(&mut rng)),
        ("info_nce", info_nce_check(&mut rng)),
        ("detection_loss", detection_check(&mut rng)),
    ];
    let ok = checks.iter().all(|(_, e)| *e <= 1e-3);
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    (ok, format!("max relative error: {detail}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let q = [0.3, -0.2, 0.9];
    let p = [1.0, 0.5, -0.4];
    let two = info_nce(&q, &p, &[&p], 0.07);
    let k = 5;
    let negs: Vec<&[f64]> = (0..k).map(|_| &p[..]).collect();
    let many = info_nce(&q, &p, &negs, 0.07);

    let grid = Grid::new(8, 8, 4);
    let targets = render_targets(&[vec![Detection::new(13.0, 17.0, 9.0, 7.0, 1.0)]], grid).unwrap();
    let perfect = DetectorOutputs {
        heatmap: targets.heatmap.clone(),
        size: targets.size.clone(),
        offset: targets.offset.clone(),
    };
    let det = detection_loss(&perfect, &targets, Config::default().detection.weights()).unwrap();
    let ok = (two - 2f64.ln()).abs() <= 1e-6 && (many - ((k + 1) as f64).ln()).abs() <= 1e-6 && det.total == 0.0;
    (
        ok,
        format!(
            "equal logits {two:.9} (ln 2 = {:.9}); {k} equal negatives {many:.9} (ln {} = {:.9}); perfect detection {}",
            2f64.ln(),
            k + 1,
            ((k + 1) as f64).ln(),
            det.total
        ),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut cfg = desk_config();
    cfg.inference.score_threshold = 0.0;
    cfg.inference.max_detections = 1000;
    let mut no_fta = cfg.clone();
    no_fta.modules.fta = false;
    let model = Model::new(&cfg.model, 5);
    let seq = generate_sequence("g", &SynthesisParams { frames: 2, ..cfg.synthesis.clone() }).unwrap();
    let prev = image_to_tensor(&seq.frames[0]);
    let cur = image_to_tensor(&seq.frames[1]);
    let (_, mut state) = infer_frame(&model, &cfg, &prev, None).unwrap();
    let gt = seq.detections(0)[0];

    state.detections = vec![Detection { score: 0.59, ..gt }];
    let (gated, _) = infer_frame(&model, &cfg, &cur, Some(&state)).unwrap();
    let (plain, _) = infer_frame(&model, &no_fta, &cur, Some(&state)).unwrap();
    let identical = !gated.fta_applied
        && gated.detections.len() == plain.detections.len()
        && gated.detections.iter().zip(&plain.detections).all(|(a, b)| {
            [a.cx, a.cy, a.w, a.h, a.score]
                .iter()
                .zip([b.cx, b.cy, b.w, b.h, b.score])
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });

    state.detections = vec![Detection { score: 0.61, ..gt }];
    let (open, _) = infer_frame(&model, &cfg, &cur, Some(&state)).unwrap();
    let alpha = open.alpha.unwrap_or(f64::NAN);
    let bounded = open.fta_applied && alpha >= (-1f64).exp() && alpha <= 1f64.exp();
    (
        identical && bounded,
        format!(
            "score 0.59: bit-identical to FTA off = {identical} ({} boxes); score 0.61: applied = {}, alpha = {alpha:.6}",
            gated.detections.len(),
            open.fta_applied
        ),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut cfg = desk_config();
    cfg.modules = adjvid_core::pipeline::config::ModuleSwitches::all_off();
    cfg.augment.enabled = true;
    cfg.optimizer.epochs = 3;
    let seqs = generate_dataset(&SynthesisParams { frames: 9, ..cfg.synthesis.clone() }, 3, 6).unwrap();
    let pairs = build_pairs(&seqs);
    let mut full = Trainer::new(&cfg).unwrap();
    let mut base = BaseTrainer::new(&cfg).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..cfg.optimizer.epochs {
        a.extend(full.train_epoch(&pairs).unwrap());
        b.extend(base.train_epoch(&pairs).unwrap());
    }
    let same = a.len() == b.len()
        && a.iter().zip(&b).all(|(x, y)| {
            x.detection.to_bits() == y.detection.to_bits() && x.total.to_bits() == y.total.to_bits()
        });
    (
        same,
        format!(
            "{} steps over {} epochs with augmentation; final loss {:.6} vs {:.6}",
            a.len(),
            cfg.optimizer.epochs,
            a.last().map_or(f64::NAN, |r| r.total),
            b.last().map_or(f64::NAN, |r| r.total)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn split_f1(model: &Model, cfg: &Config, seqs: &[VideoSequence]) -> f64 {
    let mut counts = Counts::default();
    for seq in seqs {
        for (t, r) in infer_video(model, cfg, seq).unwrap().iter().enumerate() {
            counts += match_detections(&r.detections, &seq.detections(t), MatchCriterion::CenterInBox).counts();
        }
    }
    precision_recall_f1(counts).f1
}

fn criterion_7() -> Outcome {
    let mut cfg = desk_config();
    cfg.optimizer.epochs = 200;
    cfg.inference.score_threshold = 0.3;
    let seqs = generate_dataset(&cfg.synthesis, 8, cfg.seed).unwrap();
    let pairs = build_pairs(&seqs);
    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut f1 = 0.0;
    while trainer.epoch < 200 {
        trainer.train_epoch(&pairs).unwrap();
        if trainer.epoch % 5 == 0 {
            f1 = split_f1(&trainer.model, &cfg, &seqs);
            if f1 >= 0.9 {
                break;
            }
        }
        if start.elapsed().as_secs() > 30 * 60 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        f1 >= 0.9 && secs <= 1800.0,
        format!("training F1 {f1:.3} after {} epochs, {secs:.0} s", trainer.epoch),
    )
}

// ---------------------------------------------------------------- 8

fn fast_params(cfg: &Config) -> SynthesisParams {
    SynthesisParams {
        min_size: 10,
        max_size: 16,
        min_speed: 3.0,
        max_speed: 5.0,
        jitter: 2,
        blur: true,
        occlusion: true,
        targets: 2,
        ..cfg.synthesis.clone()
    }
}

fn criterion_8() -> Outcome {
    let base_cfg = desk_config();
    let params = fast_params(&base_cfg);
    let train = generate_dataset(&params, 8, 800).unwrap();
    let test = generate_dataset(&params, 4, 801).unwrap();
    let scores: Vec<f64> = test.iter().flat_map(|s| motion_iou(s, 10)).map(|m| m.score).collect();
    let mean_miou = scores.iter().sum::<f64>() / scores.len() as f64;
    let pairs = build_pairs(&train);
    let mut f1s = [Vec::new(), Vec::new()];
    for seed in 0..3u64 {
        for (k, full) in [true, false].into_iter().enumerate() {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            if !full {
                cfg.modules = adjvid_core::pipeline::config::ModuleSwitches::all_off();
            }
            let mut trainer = Trainer::new(&cfg).unwrap();
            for _ in 0..cfg.optimizer.epochs {
                trainer.train_epoch(&pairs).unwrap();
            }
            f1s[k].push(split_f1(&trainer.model, &cfg, &test));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (full, base) = (mean(&f1s[0]), mean(&f1s[1]));
    (
        mean_miou <= 0.7 && full >= base,
        format!(
            "held-out mean motion IoU {mean_miou:.3}; F1 full {full:.4} {:?} vs baseline {base:.4} {:?}; delta {:+.2} points (reference figure +9.2)",
            f1s[0].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            f1s[1].iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            100.0 * (full - base)
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    // a constant-velocity track that never reaches the frame edge
    let mut found = None;
    for seed in 0..200 {
        let p = SynthesisParams {
            width: 160,
            height: 64,
            frames: 30,
            min_size: 16,
            max_size: 16,
            min_speed: 2.0,
            max_speed: 2.0,
            heading_deg: Some(0.0),
            jitter: 0,
            seed,
            ..SynthesisParams::default()
        };
        let seq = generate_sequence("cv", &p).unwrap();
        let x0 = seq.annotations[0][0].bbox.x1;
        if seq.annotations.iter().enumerate().all(|(t, b)| b[0].bbox.x1 == x0 + 2 * t as i64) {
            found = Some(seq);
            break;
        }
    }
    let Some(seq) = found else {
        return (false, "no edge-free constant-velocity clip found".into());
    };
    let w = 16.0;
    let mut worst = 0.0f64;
    for m in motion_iou(&seq, 10) {
        let ds: Vec<i64> = (-10i64..=10)
            .filter(|&d| d != 0 && m.frame as i64 + d >= 0 && m.frame as i64 + d < 30)
            .collect();
        let analytic = ds
            .iter()
            .map(|&d| {
                let s = 2.0 * d.abs() as f64;
                ((w - s) / (w + s)).max(0.0)
            })
            .sum::<f64>()
            / ds.len() as f64;
        worst = worst.max((m.score - analytic).abs());
    }

    // constructed mix: 3 static, 2 medium (IoU 0.8), 5 fast (IoU 1/3) two-frame tracks
    let mut frames = vec![Vec::new(), Vec::new()];
    let mut track = 0;
    let mut add = |w: i64, shift: i64, count: usize| {
        for _ in 0..count {
            frames[0].push(TrackBox { track, bbox: PixelBox::new(0, 0, w, 10) });
            frames[1].push(TrackBox { track, bbox: PixelBox::new(shift, 0, shift + w, 10) });
            track += 1;
        }
    };
    add(10, 0, 3);
    add(9, 1, 2);
    add(10, 5, 5);
    let mix = VideoSequence {
        id: "mix".into(),
        frames: vec![image::RgbImage::new(32, 16); 2],
        annotations: frames,
    };
    let scores: Vec<f64> = motion_iou(&mix, 10).iter().map(|m| m.score).collect();
    let p = speed_histogram(&scores, SpeedBins::default());
    let exact = (p.slow, p.medium, p.fast) == (0.3, 0.2, 0.5);
    (
        worst <= 1e-6 && exact,
        format!(
            "translated-box formula max |diff| {worst:.1e}; mixed proportions ({}, {}, {}) vs (0.3, 0.2, 0.5)",
            p.slow, p.medium, p.fast
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let bin = env!("CARGO_BIN_EXE_adjvid");
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("binary runs");
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let data = root.join("data");
    let (a, b) = (root.join("a"), root.join("b"));
    let desk_s = desk.to_str().unwrap();
    run(&["generate", "--config", desk_s, "--set", "dataset.sequences=2", "--set", "synthesis.frames=8", "--out", data.to_str().unwrap()]);
    run(&["train", "--config", desk_s, "--set", "optimizer.epochs=2", "--data", data.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    let snap = a.join("config.toml");
    run(&["train", "--config", snap.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    let la = std::fs::read(a.join("loss.csv")).unwrap();
    let lb = std::fs::read(b.join("loss.csv")).unwrap();
    let same_loss = la == lb && !la.is_empty();

    // checkpoint round trip through the library
    let mut cfg = desk_config();
    cfg.optimizer.epochs = 1;
    let seqs = generate_dataset(&SynthesisParams { frames: 8, ..cfg.synthesis.clone() }, 2, 10).unwrap();
    let mut trainer = Trainer::new(&cfg).unwrap();
    trainer.train_epoch(&build_pairs(&seqs)).unwrap();
    let before = infer_video(&trainer.model, &cfg, &seqs[0]).unwrap();
    let path = root.join("model.bin");
    save_checkpoint(&trainer.model, &cfg, &path).unwrap();
    let (loaded, _) = load_checkpoint(&path, Some(&cfg.model)).unwrap();
    let after = infer_video(&loaded, &cfg, &seqs[0]).unwrap();
    let same_infer = before == after;
    (
        same_loss && same_infer,
        format!("loss CSVs identical = {same_loss} ({} bytes); checkpoint inference identical = {same_infer}", la.len()),
    )
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "oracle equivalence", criterion_1),
        (2, "zero-offset deformable equivalence", criterion_2),
        (3, "gradient suite", criterion_3),
        (4, "closed-form losses", criterion_4),
        (5, "gating semantics", criterion_5),
        (6, "ablation nesting", criterion_6),
        (7, "overfit sanity", criterion_7),
        (8, "directional ablation", criterion_8),
        (9, "analyzer fidelity", criterion_9),
        (10, "determinism", criterion_10),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = f();
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name} | {detail} | {:.1} s",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
