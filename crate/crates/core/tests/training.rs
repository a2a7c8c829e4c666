//! Optimizer, loss masking, sampler determinism, checkpoint resume and the
//! on-disk volume format.

use transdod_core::data::{case_geometry, decode_volume, encode_volume, generate_case, task, Split, TASKS};
use transdod_core::engine::checkpoint::Checkpoint;
use transdod_core::engine::infer::{default_stride, window_placements};
use transdod_core::engine::optim::{poly_lr, AdamState, AdamW};
use transdod_core::engine::train::{Dataset, StepRecord, Trainer};
use transdod_core::engine::TrainConfig;
use transdod_core::objective::{masked_loss, LabelPair, DICE_EPS};
use transdod_core::{Error, Model, ModelConfig};
use transdod_tensor::{Graph, Tensor};

fn tiny_data() -> Dataset {
    let cases = [(0, 1), (1, 2), (1, 3), (0, 9)].map(|(t, seed)| {
        let split = if seed == 9 { Split::Val } else { Split::Train };
        (split, generate_case(&TASKS[t], seed, [16, 16, 16]).unwrap())
    });
    Dataset::from_cases(cases).unwrap()
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        lr_init: 1e-3,
        max_epoch: 10,
        steps_per_epoch: 2,
        batch_size: 2,
        seed: 11,
        patch: [8, 8, 8],
        window: [16, 16, 16],
        flip: true,
        ..TrainConfig::default()
    }
}

fn steps(t: &mut Trainer, data: &Dataset, n: usize) -> Vec<StepRecord> {
    (0..n).map(|_| t.step(data).unwrap()).collect()
}

#[test]
fn adamw_minimizes_a_parabola() {
    let opt = AdamW::new(0.0);
    let mut p = vec![Tensor::new([1], vec![1.0f64]).unwrap()];
    let mut st = AdamState::zeros(&p);
    let lr = 0.05;
    opt.step(&mut p, &[vec![2.0]], &mut st, lr);
    assert!((p[0].data()[0] - (1.0 - lr)).abs() < 1e-6);
    let mut reached = None;
    for k in 1..200 {
        let x = p[0].data()[0];
        opt.step(&mut p, &[vec![2.0 * x]], &mut st, lr);
        if p[0].data()[0].abs() < 0.1 {
            reached = Some(k);
            break;
        }
    }
    assert!(reached.is_some(), "still at {}", p[0].data()[0]);
}

#[test]
fn poly_schedule_midpoint() {
    let lr = poly_lr(150, 300, 2e-4).unwrap();
    assert!((lr / 2e-4 - 0.53589).abs() < 1e-5);
}

#[test]
fn unlabeled_channel_gets_no_gradient() {
    let cfg = ModelConfig::micro();
    let model = Model::<f64>::new(&cfg, 2).unwrap();
    let case = generate_case(&task(1).unwrap(), 5, [16, 16, 16]).unwrap();
    let crop: Tensor<f64> = case.image.cast();
    let pair = LabelPair::<f64>::from_labels(&case.labels, [16, 16, 16], true, false).unwrap();
    let n = 16 * 16 * 16;

    let run = |shift: f64| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let x = g.constant(crop.clone());
        let (_, logits) = model.task_logits(&mut g, &p, x, 1).unwrap();
        let delta = g.constant(Tensor::from_fn([2, 16, 16, 16], |i| if i >= n { shift } else { 0.0 }));
        let shifted = g.add(logits, delta).unwrap();
        let loss = masked_loss(&mut g, shifted, &pair, DICE_EPS).unwrap();
        let grads = g.backward(loss.total).unwrap();
        let dlogits = grads.get(shifted).unwrap().to_vec();
        let dparams: Vec<Vec<f64>> = p
            .vars()
            .iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
            .collect();
        (g.value(loss.total).data()[0], dlogits, dparams)
    };
    let (l0, dl0, dp0) = run(0.0);
    let (l1, _, dp1) = run(3.7);
    assert!(dl0[n..].iter().all(|&v| v == 0.0));
    assert!(dl0[..n].iter().any(|&v| v != 0.0));
    assert_eq!(l0.to_bits(), l1.to_bits());
    assert_eq!(dp0, dp1);
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data();
    let cfg = ModelConfig::micro();
    let mut a = Trainer::new(&cfg, &tiny_train()).unwrap();
    let mut b = Trainer::new(&cfg, &tiny_train()).unwrap();
    let ra = steps(&mut a, &data, 4);
    assert_eq!(ra, steps(&mut b, &data, 4));
    assert_eq!(ra.iter().map(|r| r.task).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
    assert_eq!(a.model.params.tensors(), b.model.params.tensors());
}

#[test]
fn checkpoint_resume_continues_the_same_trajectory() {
    let data = tiny_data();
    let cfg = ModelConfig::micro();
    let mut straight = Trainer::new(&cfg, &tiny_train()).unwrap();
    let full = steps(&mut straight, &data, 5);

    let mut first = Trainer::new(&cfg, &tiny_train()).unwrap();
    let mut rec = steps(&mut first, &data, 2);
    let bytes = first.checkpoint().encode().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    rec.extend(steps(&mut resumed, &data, 3));
    assert_eq!(rec, full);
    assert_eq!(resumed.model.params.tensors(), straight.model.params.tensors());
    assert_eq!(resumed.adam, straight.adam);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() - 4]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn volume_container_round_trips() {
    let case = generate_case(&TASKS[3], 42, [16, 18, 20]).unwrap();
    let bytes = encode_volume(&case);
    let back = decode_volume(&bytes).unwrap();
    assert_eq!(back.image, case.image);
    assert_eq!(back.labels, case.labels);
    assert_eq!((back.task_id, back.seed), (3, 42));

    let mut bad = bytes.clone();
    bad[3] = b'X';
    assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));
    assert!(matches!(
        decode_volume(&bytes[..bytes.len() - 1]),
        Err(Error::Format { .. })
    ));
}

#[test]
fn generator_is_seeded() {
    let t = &TASKS[0];
    let dims = [32, 48, 48];
    assert_eq!(generate_case(t, 7, dims).unwrap(), generate_case(t, 7, dims).unwrap());
    let distinct = (0..100u64)
        .filter(|&k| case_geometry(t, 2 * k, dims).organ_center != case_geometry(t, 2 * k + 1, dims).organ_center)
        .count();
    assert!(distinct >= 99);
}

#[test]
fn windows_cover_an_uneven_volume() {
    let dims = [40, 70, 70];
    let window = [32, 64, 64];
    let starts = window_placements(dims, window, default_stride(window)).unwrap();
    let mut hit = vec![false; dims.iter().product()];
    for at in &starts {
        for z in at[0]..at[0] + window[0] {
            for y in at[1]..at[1] + window[1] {
                for x in at[2]..at[2] + window[2] {
                    hit[(z * dims[1] + y) * dims[2] + x] = true;
                }
            }
        }
    }
    assert!(hit.iter().all(|&h| h));
    assert!(starts.iter().all(|s| (0..3).all(|a| s[a] + window[a] <= dims[a])));
}
