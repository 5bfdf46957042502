use modalfuse::metrics::{accuracy, correct_voxels, dice, overlap, WHOLE_TUMOR};
use modalfuse::rng::{stream, Stream};
use modalfuse::{EvalReport, LabelVolume};
use rand::Rng as _;

fn random_volume(rng: &mut modalfuse::rng::Rng, skew: f64) -> LabelVolume {
    let data = (0..216)
        .map(|_| if rng.random_bool(skew) { 0 } else { rng.random_range(0..5u8) })
        .collect();
    LabelVolume::new(&[6, 6, 6], data).unwrap()
}

#[test]
fn dice_and_accuracy_match_explicit_loops() {
    let mut rng = stream(42, Stream::Eval, &[]);
    let mut pooled = EvalReport::new(5);
    let (mut pooled_tp, mut pooled_fp, mut pooled_fn, mut pooled_ok) = (0u64, 0u64, 0u64, 0u64);
    for k in 0..200 {
        let skew = [0.0, 0.5, 0.9, 1.0][k % 4];
        let p = random_volume(&mut rng, skew);
        let t = random_volume(&mut rng, skew);
        let (mut tp, mut fp, mut fn_, mut ok) = (0u64, 0u64, 0u64, 0u64);
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let a = p.get(&[z, y, x]) != 0;
                    let b = t.get(&[z, y, x]) != 0;
                    match (a, b) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                    ok += u64::from(p.get(&[z, y, x]) == t.get(&[z, y, x]));
                }
            }
        }
        let c = overlap(&p, &t, &WHOLE_TUMOR).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (tp, fp, fn_));
        let expect = if tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        assert_eq!(dice(&p, &t, &WHOLE_TUMOR).unwrap(), expect);
        assert_eq!(correct_voxels(&p, &t).unwrap(), ok);
        assert_eq!(accuracy(&p, &t).unwrap(), ok as f64 / 216.0);

        for class in 0..5u8 {
            let mut ct = 0;
            for (a, b) in p.data().iter().zip(t.data()) {
                ct += u64::from(*a == class && *b == class);
            }
            assert_eq!(overlap(&p, &t, &[class]).unwrap().tp, ct);
        }
        pooled.add(&p, &t).unwrap();
        pooled_tp += tp;
        pooled_fp += fp;
        pooled_fn += fn_;
        pooled_ok += ok;
    }
    assert_eq!(pooled.correct, pooled_ok);
    assert_eq!(pooled.voxels, 200 * 216);
    let expect = 2.0 * pooled_tp as f64 / (2 * pooled_tp + pooled_fp + pooled_fn) as f64;
    assert_eq!(pooled.dice_whole_tumor, expect);
}

#[test]
fn empty_sets_score_one() {
    let empty = LabelVolume::zeros(&[6, 6, 6]);
    assert_eq!(dice(&empty, &empty, &WHOLE_TUMOR).unwrap(), 1.0);
    let mut full = LabelVolume::zeros(&[6, 6, 6]);
    full.set(&[1, 2, 3], 4);
    assert_eq!(dice(&full, &empty, &WHOLE_TUMOR).unwrap(), 0.0);
    assert_eq!(dice(&empty, &full, &WHOLE_TUMOR).unwrap(), 0.0);
}

#[test]
fn shape_mismatch_is_rejected() {
    let a = LabelVolume::zeros(&[6, 6, 6]);
    let b = LabelVolume::zeros(&[6, 6, 5]);
    assert!(dice(&a, &b, &WHOLE_TUMOR).is_err());
    assert!(accuracy(&a, &b).is_err());
}
