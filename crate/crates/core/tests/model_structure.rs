use modalfuse::metrics::memory_accuracy_ratio;
use modalfuse::rng::{stream, Stream};
use modalfuse::{ArchitectureSpec, FusionFn, FusionPoint, FusionSpec, LabelVolume, Mode, Network, Tensor, Variant};
use rand::Rng as _;

fn random_batch(spec: &ArchitectureSpec, b: usize, seed: u64) -> Tensor<f32> {
    let mut rng = stream(seed, Stream::Eval, &[]);
    let mut shape = vec![b];
    shape.extend_from_slice(&spec.input_shape());
    Tensor::from_fn(&shape, |_| rng.random_range(0.0..1.0))
}

fn fused(point: FusionPoint, function: FusionFn) -> Variant {
    Variant::Fused(FusionSpec::new(point, function))
}

#[test]
fn every_standard_variant_keeps_the_shape_chain() {
    let channels = [30, 40, 40, 50];
    let extents = [21, 17, 13, 9];
    for variant in Variant::all() {
        let spec = ArchitectureSpec::standard(variant);
        let net = Network::<f32>::build_seeded(&spec, 3).unwrap();
        let x = random_batch(&spec, 1, 1);
        let logits = net.predict(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 5, 9, 9, 9], "{variant}");

        let trace = net.trace(&x.index_leading(0), Mode::Eval, 0).unwrap();
        let k = spec.fusion().map_or(0, |f| f.point.blocks_before());
        for b in 1..=4 {
            let expect = [channels[b - 1], extents[b - 1], extents[b - 1], extents[b - 1]];
            if b <= k {
                for s in 0..4 {
                    let t = trace.get(&format!("stream{s}/conv{b}/dropout")).unwrap();
                    assert_eq!(t.shape(), &expect, "{variant} stream {s} block {b}");
                }
            } else {
                let t = trace.get(&format!("conv{b}/dropout")).unwrap();
                assert_eq!(t.shape(), &expect, "{variant} block {b}");
            }
        }
        if k > 0 {
            let e = extents[k - 1];
            let c = channels[k - 1];
            assert_eq!(trace.get("fusion/input").unwrap().shape(), &[4, c, e, e, e]);
            assert_eq!(trace.get("fusion/output").unwrap().shape(), &[c, e, e, e]);
            assert_eq!(net.fusion_input_shape().unwrap(), vec![4, c, e, e, e]);
        }
        assert_eq!(trace.get("logits").unwrap().shape(), &[5, 9, 9, 9]);
    }
}

#[test]
fn parameter_totals_are_ordered_by_fusion_depth() {
    let total = |v: Variant| Network::<f32>::structure(&ArchitectureSpec::standard(v)).unwrap().count_parameters().total;
    let base = total(Variant::Baseline);
    let points = [FusionPoint::Early, FusionPoint::Middle, FusionPoint::Late];
    let fns = [FusionFn::Max, FusionFn::Sum, FusionFn::Conv];
    for f in fns {
        let t: Vec<usize> = points.iter().map(|&p| total(fused(p, f))).collect();
        assert!(base < t[0] && t[0] < t[1] && t[1] < t[2], "{f:?}: {base} {t:?}");
        // Any fixed accuracies give strictly falling ratios with depth.
        let r: Vec<f64> = t.iter().map(|&p| memory_accuracy_ratio(0.98, p, 0.98, base).unwrap()).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{f:?}: {r:?}");
    }
    for (p, c) in points.iter().zip([30usize, 40, 50]) {
        let max = total(fused(*p, FusionFn::Max));
        assert_eq!(max, total(fused(*p, FusionFn::Sum)));
        assert_eq!(total(fused(*p, FusionFn::Conv)), max + 4 * c * c + c);
    }
}

#[test]
fn closed_form_layer_counts() {
    let base = Network::<f32>::structure(&ArchitectureSpec::standard(Variant::Baseline)).unwrap().count_parameters();
    assert_eq!(base.row("conv1-1").unwrap().total, 3270);
    let early = Network::<f32>::structure(&ArchitectureSpec::standard(fused(FusionPoint::Early, FusionFn::Sum)))
        .unwrap()
        .count_parameters();
    for s in 0..4 {
        assert_eq!(early.row(&format!("stream{s}/conv1-1")).unwrap().total, 840);
    }
    let sum: usize = base.rows.iter().map(|r| r.total).sum();
    assert_eq!(sum, base.total);
}

fn copy_stream0_everywhere(net: &mut Network<f32>) {
    let values: Vec<(String, Tensor<f32>)> =
        net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    for p in net.params_mut().iter_mut() {
        if let Some(rest) = p.name.strip_prefix("stream").and_then(|r| r.split_once('/')).map(|(_, r)| r) {
            let src = format!("stream0/{rest}");
            p.value = values.iter().find(|(n, _)| *n == src).unwrap().1.clone();
        }
    }
}

fn replicated_modality(spec: &ArchitectureSpec, seed: u64) -> Tensor<f32> {
    let one = random_batch(&ArchitectureSpec { modalities: 1, ..spec.clone() }, 1, seed);
    let per = one.len();
    Tensor::from_fn(&[1, 4, 25, 25, 25], |i| one.data()[i % per])
}

#[test]
fn max_fusion_of_identical_streams_equals_each_stream() {
    for point in [FusionPoint::Early, FusionPoint::Middle, FusionPoint::Late] {
        let spec = ArchitectureSpec::tiny(fused(point, FusionFn::Max));
        let mut net = Network::<f32>::build_seeded(&spec, 9).unwrap();
        copy_stream0_everywhere(&mut net);
        let x = replicated_modality(&spec, 4);
        let trace = net.trace(&x.index_leading(0), Mode::Eval, 0).unwrap();
        let out = trace.get("fusion/output").unwrap();
        let k = point.blocks_before();
        for s in 0..4 {
            assert_eq!(trace.get(&format!("stream{s}/conv{k}/dropout")).unwrap(), out, "{point:?} stream {s}");
        }
    }
}

#[test]
fn sum_fusion_gives_identical_streams_identical_gradients() {
    for point in [FusionPoint::Early, FusionPoint::Middle, FusionPoint::Late] {
        let spec = ArchitectureSpec {
            conv_dropout: 0.0,
            ..ArchitectureSpec::tiny(fused(point, FusionFn::Sum))
        };
        let mut net = Network::<f64>::build_seeded(&spec, 2).unwrap();
        let values: Vec<(String, Tensor<f64>)> =
            net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for p in net.params_mut().iter_mut() {
            if let Some((_, rest)) = p.name.strip_prefix("stream").and_then(|r| r.split_once('/')) {
                let src = format!("stream0/{rest}");
                p.value = values.iter().find(|(n, _)| *n == src).unwrap().1.clone();
            }
        }
        let x32 = replicated_modality(&ArchitectureSpec::tiny(Variant::Baseline), 6);
        let x = Tensor::from_fn(x32.shape(), |i| x32.data()[i] as f64);
        let label = LabelVolume::new(&[9, 9, 9], (0..729).map(|i| (i % 5) as u8).collect()).unwrap();
        net.loss_and_grad(&x, &[label], 11).unwrap();
        for p in net.params().iter().filter(|p| p.name.starts_with("stream0/")) {
            let rest = &p.name["stream0/".len()..];
            for s in 1..4 {
                let other = net.params().iter().find(|q| q.name == format!("stream{s}/{rest}")).unwrap();
                assert_eq!(p.grad, other.grad, "{point:?} {}", p.name);
            }
            assert!(p.grad.data().iter().any(|g| *g != 0.0));
        }
    }
}

#[test]
fn selecting_stream_zero_reproduces_a_single_modality_baseline() {
    for point in [FusionPoint::Early, FusionPoint::Middle, FusionPoint::Late] {
        let spec = ArchitectureSpec::tiny(fused(point, FusionFn::Conv));
        let mut net = Network::<f32>::build_seeded(&spec, 21).unwrap();
        let c = spec.block_output_channels(point.blocks_before());
        // Weight 1 on stream 0's matching channel, nothing from streams 1-3.
        let mut full = vec![0.0f32; c * 4 * c];
        for o in 0..c {
            full[o * 4 * c + o] = 1.0;
        }
        for p in net.params_mut().iter_mut() {
            if p.name == "fusion/w" {
                p.value = Tensor::from_vec(p.value.shape(), full.clone()).unwrap();
            } else if p.name == "fusion/b" {
                p.value = Tensor::zeros(p.value.shape());
            }
        }

        let single = ArchitectureSpec {
            modalities: 1,
            ..ArchitectureSpec::tiny(Variant::Baseline)
        };
        let mut base = Network::<f32>::build_seeded(&single, 0).unwrap();
        for p in base.params_mut().iter_mut() {
            let fused_name = if (1..=point.blocks_before()).any(|b| p.name.starts_with(&format!("conv{b}-"))) {
                format!("stream0/{}", p.name)
            } else {
                p.name.clone()
            };
            p.value = net.params().iter().find(|q| q.name == fused_name).unwrap().value.clone();
        }

        let x = random_batch(&spec, 2, 8);
        let first: Vec<f32> = (0..2).flat_map(|b| x.index_leading(b).leading_slice(0).to_vec()).collect();
        let x1 = Tensor::from_vec(&[2, 1, 25, 25, 25], first).unwrap();
        let a = net.predict(&x).unwrap();
        let b = base.predict(&x1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-5 * u.abs().max(1.0), "{point:?}: {u} vs {v}");
        }
    }
}

#[test]
fn eval_is_pure_and_train_depends_on_seed() {
    let spec = ArchitectureSpec::tiny(fused(FusionPoint::Middle, FusionFn::Max));
    let mut net = Network::<f32>::build_seeded(&spec, 5).unwrap();
    let x = random_batch(&spec, 2, 3);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
    let a = net.forward(&x, Mode::Train, 1).unwrap();
    let b = net.forward(&x, Mode::Train, 1).unwrap();
    let c = net.forward(&x, Mode::Train, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn initial_loss_is_near_uniform() {
    for variant in Variant::all() {
        let spec = ArchitectureSpec::tiny(variant);
        let net = Network::<f32>::build_seeded(&spec, 1).unwrap();
        let x = random_batch(&spec, 4, 2);
        let labels: Vec<LabelVolume> = (0..4)
            .map(|b| LabelVolume::new(&[9, 9, 9], (0..729).map(|i| ((i + b) % 5) as u8).collect()).unwrap())
            .collect();
        let loss = net.loss(&x, &labels, Mode::Eval, 0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 0.05 * 5f64.ln(), "{variant}: {loss}");
    }
}
