use hypervision::autograd::{Padding, PoolKind, Tape};
use hypervision::network::coordconv_augment;
use hypervision::Tensor;
use proptest::prelude::*;

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-4.0f64..4.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn dims() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5).prop_map(|(b, c, h, w)| [b, c, 2 * h, 2 * w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(x in dims().prop_flat_map(tensor)) {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let p = t.softmax_channels(v).unwrap();
        let (b, c, h, w) = x.dims4("test").unwrap();
        let d = t.value(p).data();
        for n in 0..b {
            for i in 0..h * w {
                let s: f64 = (0..c).map(|k| d[(n * c + k) * h * w + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        prop_assert!(d.iter().all(|&p| p > 0.0 && p <= 1.0));
    }

    #[test]
    fn max_pool_dominates_average(x in dims().prop_flat_map(tensor)) {
        let mut t = Tape::new();
        let v = t.constant(x);
        let mx = t.global_pool(v, PoolKind::Max).unwrap();
        let av = t.global_pool(v, PoolKind::Avg).unwrap();
        let window = t.maxpool2d(v, 2).unwrap();
        let wmax = t.global_pool(window, PoolKind::Max).unwrap();
        for ((a, m), w) in t.value(av).data().iter().zip(t.value(mx).data()).zip(t.value(wmax).data()) {
            prop_assert!(a <= m);
            prop_assert_eq!(m, w);
        }
    }

    #[test]
    fn upsample_then_pool_is_identity(x in dims().prop_flat_map(tensor), f in 1usize..4) {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let up = t.upsample_nearest2d(v, f).unwrap();
        let back = if f == 1 { up } else { t.maxpool2d(up, f).unwrap() };
        prop_assert!(t.value(back).bit_eq(&x));
    }

    #[test]
    fn concat_then_select_roundtrips(a in tensor([2, 2, 4, 4]), b in tensor([2, 3, 4, 4])) {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let cat = t.concat_channels(&[va, vb]).unwrap();
        prop_assert_eq!(t.value(cat).shape(), &[2, 5, 4, 4]);
        let third = t.select_channel(cat, 3).unwrap();
        let want = t.select_channel(vb, 1).unwrap();
        prop_assert!(t.value(third).bit_eq(t.value(want)));
    }

    #[test]
    fn conv_is_linear_in_its_input(x in tensor([1, 2, 6, 6]), y in tensor([1, 2, 6, 6]), k in tensor([3, 2, 3, 3])) {
        let mut t = Tape::new();
        let (vx, vy, vk) = (t.constant(x), t.constant(y), t.constant(k));
        let b = t.constant(Tensor::zeros(&[3]));
        let sum = t.add(vx, vy).unwrap();
        let lhs = t.conv2d(sum, vk, b, Padding::Same).unwrap();
        let cx = t.conv2d(vx, vk, b, Padding::Same).unwrap();
        let cy = t.conv2d(vy, vk, b, Padding::Same).unwrap();
        let rhs = t.add(cx, cy).unwrap();
        prop_assert!(t.value(lhs).max_abs_diff(t.value(rhs)).unwrap() < 1e-10);
    }

    #[test]
    fn coordinate_channels_ignore_content(x in (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(b, h, w)| tensor([b, 1, h, w]))) {
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = coordconv_augment(&mut t, v).unwrap();
        let (b, _, h, w) = x.dims4("test").unwrap();
        let zero = t.constant(Tensor::zeros(&[b, 1, h, w]));
        let ref_out = coordconv_augment(&mut t, zero).unwrap();
        let (d, r) = (t.value(out).data(), t.value(ref_out).data());
        let plane = h * w;
        for n in 0..b {
            let base = n * 3 * plane;
            prop_assert_eq!(&d[base..base + plane], &x.data()[n * plane..(n + 1) * plane]);
            prop_assert_eq!(&d[base + plane..base + 3 * plane], &r[base + plane..base + 3 * plane]);
            prop_assert_eq!(&d[base + plane..base + 3 * plane], &d[plane..3 * plane]);
        }
        prop_assert!(d.iter().all(|v| v.abs() <= 4.0));
    }
}
