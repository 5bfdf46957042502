use modalfuse::fusion::{block_identity_kernel, fuse_conv, fuse_max, fuse_max_backward, fuse_sum, fuse_sum_backward};
use modalfuse::rng::{stream, Stream};
use modalfuse::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;

const N: usize = 4;

fn instance(seed: u64, k: u64) -> Tensor<f64> {
    let mut rng = stream(seed, Stream::Eval, &[k]);
    let c = rng.random_range(1..=4);
    let e: Vec<usize> = (0..3).map(|_| rng.random_range(1..=4)).collect();
    Tensor::from_fn(&[N, c, e[0], e[1], e[2]], |_| rng.random_range(-2.0..2.0))
}

fn permuted(s: &Tensor<f64>, order: &[usize]) -> Tensor<f64> {
    let parts: Vec<Tensor<f64>> = order.iter().map(|&i| s.index_leading(i)).collect();
    Tensor::stack(&parts.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn sum_matches_loop_summation_bit_exact() {
    for k in 0..100 {
        let s = instance(1, k);
        let fused = fuse_sum(&s).unwrap();
        let per = s.item_len();
        for i in 0..per {
            let mut acc = 0.0f64;
            for n in 0..N {
                acc += s.data()[n * per + i];
            }
            assert_eq!(fused.data()[i].to_bits(), acc.to_bits(), "instance {k} element {i}");
        }
    }
}

#[test]
fn sum_in_other_association_orders_agrees() {
    for k in 0..100 {
        let s = instance(2, k);
        let fused = fuse_sum(&s).unwrap();
        let per = s.item_len();
        let at = |n: usize, i: usize| s.data()[n * per + i];
        for i in 0..per {
            let pairwise = (at(0, i) + at(1, i)) + (at(2, i) + at(3, i));
            let reversed = ((at(3, i) + at(2, i)) + at(1, i)) + at(0, i);
            assert!((fused.data()[i] - pairwise).abs() <= 1e-12);
            assert!((fused.data()[i] - reversed).abs() <= 1e-12);
        }
    }
}

#[test]
fn max_matches_brute_force() {
    for k in 0..100 {
        let s = instance(3, k);
        let fused = fuse_max(&s).unwrap().0;
        let per = s.item_len();
        for i in 0..per {
            let mut best = f64::NEG_INFINITY;
            for n in 0..N {
                best = best.max(s.data()[n * per + i]);
            }
            assert_eq!(fused.data()[i], best);
        }
    }
}

#[test]
fn block_identity_conv_reproduces_sum_and_mean() {
    for k in 0..100 {
        let s = instance(4, k);
        let c = s.shape()[1];
        let sum = fuse_sum(&s).unwrap();
        let via_conv = fuse_conv(&s, &block_identity_kernel(N, c, 1.0)).unwrap();
        let mean = fuse_conv(&s, &block_identity_kernel(N, c, 1.0 / N as f64)).unwrap();
        for ((a, b), m) in sum.data().iter().zip(via_conv.data()).zip(mean.data()) {
            assert!((a - b).abs() <= 1e-12);
            assert!((a / N as f64 - m).abs() <= 1e-12);
        }
        // Same at f32 within the looser bound.
        let s32 = Tensor::from_fn(s.shape(), |i| s.data()[i] as f32);
        let a = fuse_sum(&s32).unwrap();
        let b = fuse_conv(&s32, &block_identity_kernel(N, c, 1.0f32)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }
}

#[test]
fn max_and_sum_are_permutation_invariant() {
    let mut rng = stream(5, Stream::Shuffle, &[]);
    for k in 0..100 {
        let s = instance(5, k);
        let mut order: Vec<usize> = (0..N).collect();
        order.shuffle(&mut rng);
        let p = permuted(&s, &order);
        assert_eq!(fuse_max(&s).unwrap().0, fuse_max(&p).unwrap().0);
        let (a, b) = (fuse_sum(&s).unwrap(), fuse_sum(&p).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn max_dominates_mean_for_nonnegative_inputs() {
    for k in 0..50 {
        let s = instance(6, k);
        let s = Tensor::from_fn(s.shape(), |i| s.data()[i].abs());
        let max = fuse_max(&s).unwrap().0;
        let sum = fuse_sum(&s).unwrap();
        for (m, t) in max.data().iter().zip(sum.data()) {
            assert!(*m >= t / N as f64);
        }
    }
}

#[test]
fn backward_mass_is_conserved() {
    for k in 0..50 {
        let s = instance(7, k);
        let per = s.item_len();
        let cot = Tensor::from_fn(&s.shape()[1..], |i| ((i * 7919) % 13) as f64 - 6.0);
        let gs = fuse_sum_backward(N, &cot).unwrap();
        let (_, routing) = fuse_max(&s).unwrap();
        let gm = fuse_max_backward(&routing, &cot).unwrap();
        for i in 0..per {
            let sum_total: f64 = (0..N).map(|n| gs.data()[n * per + i]).sum();
            let max_total: f64 = (0..N).map(|n| gm.data()[n * per + i]).sum();
            assert_eq!(sum_total, N as f64 * cot.data()[i]);
            assert_eq!(max_total, cot.data()[i]);
        }
    }
}

#[test]
fn max_ties_route_to_lowest_stream() {
    let s = Tensor::from_vec(&[4, 1, 1, 1, 1], vec![1.0, 5.0, 5.0, 2.0]).unwrap();
    let (out, routing) = fuse_max(&s).unwrap();
    assert_eq!(out.data(), &[5.0]);
    let g = fuse_max_backward(&routing, &Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap()).unwrap();
    assert_eq!(g.data(), &[0.0, 3.0, 0.0, 0.0]);
}
