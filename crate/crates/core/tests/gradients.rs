//! Analytic gradients of the network components against central differences
//! in 64-bit (h = 1e-4, relative error < 1e-4).

use transdod_core::data::task;
use transdod_core::objective::{masked_loss, LabelPair, DICE_EPS};
use transdod_core::verify::{gradient_suite, FD_TOLERANCE};
use transdod_core::{Model, ModelConfig};
use transdod_tensor::{Graph, Tensor};

fn micro() -> ModelConfig {
    ModelConfig::micro()
}

#[test]
fn every_component_matches_finite_differences() {
    let suite = gradient_suite(&micro(), 7).unwrap();
    let names: Vec<&str> = suite.iter().map(|e| e.name).collect();
    for expected in [
        "instance_norm",
        "conv3d",
        "softmax",
        "self_attention",
        "trilinear_sample",
        "msda_sample",
        "deformable_attention",
        "encoder_layer",
        "decoder_layer",
        "predict_filters",
        "dynamic_forward",
        "masked_loss",
        "micro_model",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    for e in &suite {
        assert!(e.report.max_rel_err < FD_TOLERANCE, "{}: {:?}", e.name, e.report);
    }
}

#[test]
fn suite_passes_for_a_second_seed() {
    for e in gradient_suite(&micro(), 1234).unwrap() {
        assert!(e.passed(), "{}: {:?}", e.name, e.report);
    }
}

#[test]
fn organ_queries_receive_gradient() {
    let model = Model::<f32>::new(&micro(), 4).unwrap();
    let case = transdod_core::data::generate_case(&task(0).unwrap(), 1, [16, 16, 16]).unwrap();
    let crop = Tensor::from_fn([1, 8, 8, 8], |i| {
        let (z, y, x) = (i / 64, (i / 8) % 8, i % 8);
        case.image.data()[((z + 4) * 16 + y + 4) * 16 + x + 4]
    });
    let labels: Vec<u8> = (0..512)
        .map(|i| {
            let (z, y, x) = (i / 64, (i / 8) % 8, i % 8);
            case.labels[((z + 4) * 16 + y + 4) * 16 + x + 4]
        })
        .collect();
    let pair = LabelPair::<f32>::from_labels(&labels, [8, 8, 8], true, true).unwrap();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let x = g.constant(crop);
    let (_, logits) = model.task_logits(&mut g, &p, x, 0).unwrap();
    let loss = masked_loss(&mut g, logits, &pair, DICE_EPS).unwrap();
    let grads = g.backward(loss.total).unwrap();
    let id = model.params.find("transformer.query_embed").unwrap();
    let grad = grads.get(p[id]).expect("organ queries are on the gradient path");
    assert!(grad.iter().any(|v| *v != 0.0));
}
