use lungseg::data::synthetic::{SyntheticConfig, SyntheticGenerator};
use lungseg::data::MultiClassMask;
use lungseg::multiclass::{
    argmax_labels, guided_infer, guided_train, softmax_cross_entropy, McConfig, McModel, McSample,
    NUM_CLASSES,
};
use lungseg::optim::SgdConfig;
use lungseg::plane::Plane;
use lungseg::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn logits(n: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    // Small integer logits make exact ties common.
    proptest::collection::vec(-2i8..=2, n * NUM_CLASSES * h * w).prop_map(move |v| {
        let data = v.into_iter().map(f64::from).collect();
        Tensor::from_vec(Shape::new(n, NUM_CLASSES, h, w), data).unwrap()
    })
}

proptest! {
    #[test]
    fn argmax_matches_scalar_scan(t in logits(2, 5, 4)) {
        let s = t.shape();
        for n in 0..s.n {
            let labels = argmax_labels(&t, n);
            for y in 0..s.h {
                for x in 0..s.w {
                    let scores: Vec<f64> = (0..NUM_CLASSES)
                        .map(|c| t.channel(n, c)[y * s.w + x])
                        .collect();
                    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let first = scores.iter().position(|&v| v == top).unwrap();
                    prop_assert_eq!(labels.get(y, x) as usize, first);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_differences(
        t in logits(2, 3, 3),
        labels in proptest::collection::vec(0u8..3, 18),
    ) {
        let targets = vec![
            Plane::new(3, 3, labels[..9].to_vec()).unwrap(),
            Plane::new(3, 3, labels[9..].to_vec()).unwrap(),
        ];
        let (loss, grad) = softmax_cross_entropy(&t, &targets).unwrap();
        prop_assert!(loss >= 0.0);
        let h = 1e-6;
        for i in 0..t.data().len() {
            let mut plus = t.clone();
            plus.data_mut()[i] += h;
            let mut minus = t.clone();
            minus.data_mut()[i] -= h;
            let numeric = (softmax_cross_entropy(&plus, &targets).unwrap().0
                - softmax_cross_entropy(&minus, &targets).unwrap().0)
                / (2.0 * h);
            prop_assert!((numeric - grad.data()[i]).abs() < 1e-7);
        }
    }
}

fn small_config() -> McConfig {
    McConfig {
        width: 4,
        input_size: (64, 64),
        sgd: SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        },
        epochs: 3,
        batch_size: 2,
        ..McConfig::default()
    }
}

fn samples(n: usize) -> Vec<McSample> {
    let gen = SyntheticGenerator::new(SyntheticConfig::default());
    (0..n)
        .map(|i| {
            let (pair, labels) = gen.multiclass(i).unwrap();
            McSample::new(pair.image.clone(), pair.mask.to_f64(), labels).unwrap()
        })
        .collect()
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let data = samples(3);
    let (a, curve_a) = guided_train(&data, &small_config()).unwrap();
    let (b, curve_b) = guided_train(&data, &small_config()).unwrap();
    assert_eq!(curve_a, curve_b);
    assert!(curve_a.iter().all(|v| v.is_finite()));
    assert_eq!(a.store(), b.store());

    let restored = McModel::from_checkpoint(&a.checkpoint().unwrap()).unwrap();
    let s = &data[0];
    let guidance = s.guidance.clone();
    let out_a = guided_infer(&s.image, &guidance, &a).unwrap();
    let out_b = guided_infer(&s.image, &guidance, &restored).unwrap();
    assert_eq!(out_a, out_b);
    assert_eq!(guidance, s.guidance);
    assert!(out_a.values().as_slice().iter().all(|&v| v < 3));
}

#[test]
fn label_values_outside_three_classes_are_rejected() {
    assert!(MultiClassMask::new("m", Plane::filled(4, 4, 3)).is_err());
}

#[test]
fn guidance_shape_must_match_the_slice() {
    let data = samples(1);
    let model = McModel::new(small_config()).unwrap();
    let r = model.infer(&data[0].image, &Plane::filled(8, 8, 0.5));
    assert!(matches!(r, Err(lungseg::Error::Contract(_))));
}
