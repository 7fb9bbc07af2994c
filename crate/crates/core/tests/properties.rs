use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tumorseg::augment::{
    affine_matrix, augment_planes, brightness, elastic_field, warp_pair, AugmentDraw,
    AugmentationSpec, DisplacementField,
};
use tumorseg::data::{kfold_split, normalize, Modality, Mvol, MvolData, Volume};
use tumorseg::kernels::{
    conv2d_forward, conv_transpose2d_forward, maxpool2d_backward, maxpool2d_forward,
};
use tumorseg::loss::soft_dice_loss;
use tumorseg::metrics::{confusion, dsc, region_mask, sensitivity, RegionKind};
use tumorseg::{Graph, Image, LabelPlane, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn plane_pair(h: usize, w: usize) -> impl Strategy<Value = (Image, LabelPlane)> {
    (
        prop::collection::vec(-2.0f64..2.0, h * w),
        prop::collection::vec(0u8..=4, h * w),
    )
        .prop_map(move |(i, l)| {
            (
                Image::new(h, w, i).unwrap(),
                LabelPlane::new(h, w, l).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_and_transposed_are_adjoint(
        x in tensor(vec![2, 3, 6, 4]),
        w in tensor(vec![5, 3, 3, 3]),
        y in tensor(vec![2, 5, 3, 2]),
    ) {
        let zb = Tensor::zeros(vec![5]);
        let lhs = dot(&conv2d_forward(&x, &w, &zb, 2).unwrap(), &y);
        let rhs = dot(&x, &conv_transpose2d_forward(&y, &w, &Tensor::zeros(vec![3])).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_sums_to_one(x in tensor(vec![2, 2, 3, 3]).prop_map(|t| t.map(|v| v * 800.0))) {
        let mut g = Graph::new();
        let v = g.input(x);
        let p = g.softmax2(v).unwrap();
        let d = g.value(p).data();
        for s in 0..2 {
            for i in 0..9 {
                let (a, b) = (d[s * 18 + i], d[s * 18 + 9 + i]);
                prop_assert!(a >= 0.0 && b >= 0.0);
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn maxpool_routes_all_gradient_mass(x in tensor(vec![1, 2, 4, 6]), g in tensor(vec![1, 2, 2, 3])) {
        let (out, argmax) = maxpool2d_forward(&x).unwrap();
        prop_assert_eq!(out.shape(), &[1, 2, 2, 3]);
        let back = maxpool2d_backward(x.shape(), &argmax, &g);
        prop_assert!((back.sum() - g.sum()).abs() < 1e-12);
        prop_assert_eq!(back.data().iter().filter(|v| **v != 0.0).count(), g.data().iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn concat_splits_back_exactly(a in tensor(vec![2, 2, 3, 3]), b in tensor(vec![2, 1, 3, 3])) {
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.concat_channels(va, vb).unwrap();
        let d = g.value(c).data();
        for s in 0..2 {
            prop_assert_eq!(&d[s * 27..s * 27 + 18], &a.data()[s * 18..s * 18 + 18]);
            prop_assert_eq!(&d[s * 27 + 18..s * 27 + 27], &b.data()[s * 9..s * 9 + 9]);
        }
    }

    #[test]
    fn dsc_symmetric_sensitivity_not(p in prop::collection::vec(0u8..=1, 16), t in prop::collection::vec(0u8..=1, 16)) {
        let pt = confusion(&p, &t).unwrap();
        let tp = confusion(&t, &p).unwrap();
        prop_assert_eq!(dsc(&pt), dsc(&tp));
        prop_assert!((0.0..=1.0).contains(&dsc(&pt)) && (0.0..=1.0).contains(&sensitivity(&pt)));
        if pt.tp + pt.fn_ > 0 {
            prop_assert_eq!(sensitivity(&pt), pt.tp as f64 / (pt.tp + pt.fn_) as f64);
        }
    }

    #[test]
    fn regions_nest(labels in prop::collection::vec(0u8..=4, 64)) {
        let c = region_mask(&labels, RegionKind::Complete).unwrap();
        let k = region_mask(&labels, RegionKind::Core).unwrap();
        let e = region_mask(&labels, RegionKind::Enhancing).unwrap();
        for i in 0..64 {
            prop_assert!(e[i] <= k[i] && k[i] <= c[i]);
        }
    }

    #[test]
    fn normalize_is_idempotent(data in prop::collection::vec(-100.0f64..100.0, 2..60)) {
        let n = data.len();
        let v = Volume::new([n, 1, 1], data, Modality::Flair).unwrap();
        let once = normalize(&v);
        let twice = normalize(&once);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn kfold_partitions(n in 5usize..40, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let ids: Vec<String> = (0..n).map(|i| format!("c{i}")).collect();
        let folds = kfold_split(&ids, k, seed).unwrap();
        let mut tested: Vec<&String> = folds.iter().flat_map(|f| &f.test).collect();
        tested.sort();
        let mut all: Vec<&String> = ids.iter().collect();
        all.sort();
        prop_assert_eq!(tested, all);
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.test.len(), n);
            prop_assert!(f.train.iter().all(|c| !f.test.contains(c)));
        }
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn augmentation_preserves_label_alphabet((img, lbl) in plane_pair(12, 10), seed in any::<u64>()) {
        let spec = AugmentationSpec { elastic_alpha: 40.0, elastic_sigma: 3.0, ..AugmentationSpec::default() };
        let (out_img, out_lbl) = augment_planes(&img, &lbl, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out_img.dims(), (12, 10));
        prop_assert!(out_lbl.data().iter().all(|l| *l == 0 || lbl.data().contains(l)));
    }

    #[test]
    fn double_flip_is_identity((img, lbl) in plane_pair(7, 6), h in any::<bool>(), v in any::<bool>()) {
        let m = affine_matrix(&AugmentDraw { flip_h: h, flip_v: v, ..AugmentDraw::identity() }, 7, 6);
        let (a, b) = warp_pair(&img, &lbl, &m, None).unwrap();
        let (a, b) = warp_pair(&a, &b, &m, None).unwrap();
        prop_assert_eq!(a, img);
        prop_assert_eq!(b, lbl);
    }

    #[test]
    fn zero_alpha_elastic_is_identity((img, lbl) in plane_pair(9, 9), seed in any::<u64>()) {
        let field = elastic_field(9, 9, 0.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(field.max_abs(), 0.0);
        let m = affine_matrix(&AugmentDraw::identity(), 9, 9);
        let (a, b) = warp_pair(&img, &lbl, &m, Some(&field)).unwrap();
        prop_assert_eq!(a, img);
        prop_assert_eq!(b, lbl);
    }

    #[test]
    fn unit_gamma_is_identity((img, _) in plane_pair(5, 5)) {
        let out = brightness(&img, 1.0).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mvol_round_trip_is_bit_exact(
        data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 24),
        labels in prop::collection::vec(0u8..=4, 24),
    ) {
        for m in [
            Mvol { dims: [2, 3, 4], data: MvolData::Real(data.clone()) },
            Mvol { dims: [4, 3, 2], data: MvolData::Labels(labels.clone()) },
        ] {
            let bytes = m.encode().unwrap();
            prop_assert_eq!(&Mvol::decode(&bytes).unwrap(), &m);
            prop_assert_eq!(Mvol::decode(&bytes).unwrap().encode().unwrap(), bytes);
        }
    }

    #[test]
    fn soft_dice_in_unit_interval(
        p in prop::collection::vec(0.0f64..=1.0, 32),
        t in prop::collection::vec(0u8..=1, 16),
    ) {
        let probs = Tensor::new(vec![1, 2, 4, 4], {
            let mut d = vec![0.0; 32];
            for i in 0..16 { d[i] = 1.0 - p[i]; d[16 + i] = p[i]; }
            d
        }).unwrap();
        let target = Tensor::new(vec![1, 4, 4], t.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let loss = soft_dice_loss(&probs, &target).unwrap();
        prop_assert!((0.0..=1.0).contains(&loss));
    }

    #[test]
    fn hard_predictions_link_loss_to_dsc(
        p in prop::collection::vec(0u8..=1, 2048),
        t in prop::collection::vec(0u8..=1, 2048),
    ) {
        let probs = Tensor::new(
            vec![2, 2, 32, 32],
            p.chunks(1024)
                .flat_map(|s| s.iter().map(|&v| 1.0 - f64::from(v)).chain(s.iter().map(|&v| f64::from(v))))
                .collect(),
        )
        .unwrap();
        let target = Tensor::new(vec![2, 32, 32], t.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let loss = soft_dice_loss(&probs, &target).unwrap();
        let d = dsc(&confusion(&p, &t).unwrap());
        prop_assert!((1.0 - loss - d).abs() < 1e-3, "1 - loss {} vs dsc {d}", 1.0 - loss);
    }
}

#[test]
fn displacement_zeros_is_zero() {
    assert_eq!(DisplacementField::zeros(3, 4).max_abs(), 0.0);
}
