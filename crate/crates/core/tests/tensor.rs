use onconet::tensor::io::*;
use onconet::tensor::*;
use onconet::Error;

mod core {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::zeros(vec![2, 0]).is_err());
    }

    #[test]
    fn scalar_has_rank_zero() {
        let s = Tensor::scalar(3.0f32);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item().unwrap(), 3.0);
    }

    #[test]
    fn grad_accumulates_and_resets_to_zero() {
        let mut t = Tensor::<f32>::zeros(vec![3]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn slice_channels_recovers_block() {
        let t = Tensor::<f32>::from_fn(vec![2, 3, 1, 2], |i| i as f32).unwrap();
        let s = t.slice_channels(1..3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 1, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn gemm_respects_strides() {
        // a = [[1,2],[3,4]], b = a^T via strides
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, (2, 1), &a, (1, 2), 0.0, &mut c, (2, 1));
        assert_eq!(c, [5.0, 11.0, 11.0, 25.0]);
    }
}

mod ops {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn maxpool_examples() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(vec![1, 2, 4, 4], 2.5).unwrap();
        assert!(maxpool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 2.5));
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(vec![1, 1, 6, 6], |_| rng.gen()).unwrap();
        let y = maxpool2d(&x, 2, 2).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut m = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(2 * oy + dy) * 6 + 2 * ox + dx]);
                    }
                }
                assert_eq!(y.data()[oy * 3 + ox], m);
            }
        }
    }

    #[test]
    fn selu_values() {
        let x = t(vec![3], vec![0.0, 1.0, -30.0]);
        let y = selu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.050_700_987_355_480_5);
        assert!((y.data()[2] + 1.758_099_340_847_376_6).abs() < 1e-9);
    }

    #[test]
    fn prelu_values() {
        let x = t(vec![1, 2], vec![2.0, -4.0]);
        let a = t(vec![2], vec![0.25, 0.25]);
        assert_eq!(prelu(&x, &a).unwrap().data(), &[2.0, -1.0]);
        let ones = t(vec![2], vec![1.0, 1.0]);
        assert_eq!(prelu(&x, &ones).unwrap(), x);
        assert!(prelu(&x, &t(vec![3], vec![0.0; 3])).is_err());
    }

    #[test]
    fn global_avg_pool_values() {
        let x = t(vec![1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(vec![3, 2, 5, 4], 1.5).unwrap();
        let y = global_avg_pool(&c).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn dense_examples() {
        let x = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, &t(vec![3], vec![0.0; 3])).unwrap(), x);
        let zero = Tensor::<f64>::zeros(vec![3, 2]).unwrap();
        let b = t(vec![2], vec![0.5, -1.0]);
        assert_eq!(dense(&x, &zero, &b).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
        // hand product: [[1,2,3],[4,5,6]]·[[1,2],[3,4],[5,6]] = [[22,28],[49,64]]
        let w = t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = dense(&x, &w, &t(vec![2], vec![0.0; 2])).unwrap();
        assert_eq!(y.data(), &[22.0, 28.0, 49.0, 64.0]);
        assert!(dense(&x, &t(vec![2, 2], vec![0.0; 4]), &b).is_err());
    }

    #[test]
    fn concat_preserves_order() {
        let a = t(vec![1, 1, 1, 2], vec![1.0, 2.0]);
        let b = t(vec![1, 1, 1, 2], vec![3.0, 4.0]);
        let ab = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[1, 2, 1, 2]);
        assert_eq!(ab.slice_channels(0..1).unwrap(), a);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        let wide = t(vec![1, 1, 1, 3], vec![0.0; 3]);
        assert!(concat_channels(&[&a, &wide]).is_err());
    }

    #[test]
    fn softmax_values() {
        let y = softmax(&t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(vec![1, 2], vec![1.0, 2.0])).unwrap();
        assert!((y.data()[0] - 0.26894).abs() < 1e-5 && (y.data()[1] - 0.73106).abs() < 1e-5);
        let shifted = softmax(&t(vec![1, 2], vec![101.0, 102.0])).unwrap();
        assert!(shifted.max_abs_diff(&y).unwrap() < 1e-15);
        let big = softmax(&Tensor::<f32>::new(vec![1, 3], vec![1e4, -1e4, 3.0]).unwrap()).unwrap();
        assert!((big.sum_f64() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_values() {
        let p = t(vec![1, 2], vec![1.0, 0.0]);
        assert_eq!(cross_entropy(&p, &[0]).unwrap(), 0.0);
        let p = t(vec![1, 2], vec![0.5, 0.5]);
        assert!((cross_entropy(&p, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = t(vec![1, 2], vec![0.25, 0.75]);
        assert!((cross_entropy(&p, &[1]).unwrap() - 0.287_682).abs() < 1e-6);
        assert!(cross_entropy(&p, &[2]).is_err());
        let zero = t(vec![1, 2], vec![1.0, 0.0]);
        assert!((cross_entropy(&zero, &[1]).unwrap() - 27.631_021).abs() < 1e-5);
    }
}

mod conv {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop cross-correlation, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, spec: ConvSpec) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4("t").unwrap();
        let (cout, cg, kh, kw) = k.dims4("t").unwrap();
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - kw) / spec.stride + 1;
        let og = cout / spec.groups;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for o in 0..cout {
                let grp = o / og;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            let c = grp * cg + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * spec.stride + ki) as isize - spec.padding as isize;
                                    let ix = (ox * spec.stride + kj) as isize - spec.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * cin + c) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * cg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((b * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        assert_eq!(cin, cg * spec.groups);
        Tensor::new(vec![n, cout, oh, ow], out).unwrap()
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let x = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let k = Tensor::<f32>::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d_forward(&x, &k, None, ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![2, 1, 5, 4], &mut rng);
        let k = Tensor::full(vec![1, 1, 1, 1], 1.0).unwrap();
        let y = conv2d_forward(&x, &k, None, ConvSpec::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_halves_extent() {
        assert_eq!(conv_output_size(512, 3, 2, 1).unwrap(), 256);
        assert_eq!(conv2d_transpose_output_size(64, 3, 2, 1).unwrap(), 128);
        assert_eq!(conv2d_transpose_output_size(7, 3, 1, 1).unwrap(), 7);
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, cout, groups, k, stride, pad, h, w) in &[
            (3, 4, 1, 3, 1, 1, 6, 5),
            (4, 8, 4, 3, 2, 1, 7, 8),
            (6, 4, 2, 5, 1, 2, 5, 5),
            (2, 2, 1, 1, 1, 0, 4, 4),
            (2, 6, 2, 3, 3, 0, 9, 10),
        ] {
            let spec = ConvSpec::new(stride, pad, groups);
            let x = random(vec![2, cin, h, w], &mut rng);
            let kern = random(vec![cout, cin / groups, k, k], &mut rng);
            let fast = conv2d_forward(&x, &kern, None, spec).unwrap();
            let slow = naive_conv(&x, &kern, spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_channels() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]).unwrap();
        let k = Tensor::<f32>::zeros(vec![2, 2, 3, 3]).unwrap();
        let err = conv2d_forward(&x, &k, None, ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { dim: "input channels", .. }), "{err}");
        let k = Tensor::<f32>::zeros(vec![2, 3, 7, 7]).unwrap();
        let err = conv2d_forward(&x, &k, None, ConvSpec::new(1, 1, 1)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { dim: "height", .. }), "{err}");
    }

    #[test]
    fn transpose_delta_reproduces_kernel_footprint() {
        // Scatter-accumulate oracle: a unit impulse at (2,2) deposits
        // kernel[ki][kj] at output (2 - pad + ki, 2 - pad + kj).
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 5, 5]).unwrap();
        x.data_mut()[12] = 1.0;
        let k = Tensor::<f64>::from_fn(vec![1, 1, 3, 3], |i| (i + 1) as f64).unwrap();
        let y = conv2d_transpose_forward(&x, &k, None, ConvSpec::new(1, 1, 1)).unwrap();
        let mut expect = vec![0.0; 25];
        for ki in 0..3 {
            for kj in 0..3 {
                expect[(1 + ki) * 5 + 1 + kj] += k.data()[ki * 3 + kj];
            }
        }
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(cin, cout, k, stride, pad, h) in &[(3, 2, 3, 1, 1, 6), (2, 4, 3, 2, 1, 8), (1, 3, 3, 2, 1, 6), (2, 2, 5, 2, 2, 4)] {
            let spec = ConvSpec::new(stride, pad, 1);
            let x = random(vec![2, cin, h, h], &mut rng);
            let kern = random(vec![cout, cin, k, k], &mut rng);
            let cx = conv2d_forward(&x, &kern, None, spec).unwrap();
            let y = random(cx.shape().to_vec(), &mut rng);
            let ty = conv2d_transpose_forward(&y, &kern, None, spec).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn conv_input_grad_equals_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = ConvSpec::new(2, 1, 1);
        let x = random(vec![1, 2, 8, 8], &mut rng);
        let kern = random(vec![3, 2, 3, 3], &mut rng);
        let dy = random(vec![1, 3, 4, 4], &mut rng);
        let grads = conv2d_backward(&x, &kern, &dy, spec, true).unwrap();
        let t = conv2d_transpose_forward(&dy, &kern, None, spec).unwrap();
        assert!(grads.input.unwrap().max_abs_diff(&t).unwrap() < 1e-12);
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(vec![2, 4, 9, 9], &mut rng);
        let kern = random(vec![8, 2, 3, 3], &mut rng);
        let spec = ConvSpec::new(2, 1, 2);
        let y64 = conv2d_forward(&x, &kern, None, spec).unwrap();
        let y32 = conv2d_forward(&x.cast::<f32>(), &kern.cast::<f32>(), None, spec).unwrap();
        assert!(y32.cast::<f64>().max_abs_diff(&y64).unwrap() < 1e-5);
    }

    #[test]
    fn param_count_follows_formula() {
        let p = ConvParams::new(
            Tensor::<f32>::zeros(vec![16, 2, 3, 3]).unwrap(),
            Tensor::<f32>::zeros(vec![16]).unwrap(),
            1,
            1,
            1,
        )
        .unwrap();
        assert_eq!(p.param_count(), 2 * 16 * 9 + 16);
        assert!(ConvParams::new(
            Tensor::<f32>::zeros(vec![6, 1, 3, 3]).unwrap(),
            Tensor::<f32>::zeros(vec![6]).unwrap(),
            1,
            1,
            4
        )
        .is_err());
    }
}

mod io {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"TNSR".to_vec();
        expect.extend_from_slice(&[1, 1, 2, 2, 0, 0, 0, 1, 0, 0, 0]);
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(buf.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(matches!(read_tensor(&mut &b"TNSQ\x01\x01\x00"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"TNSR\x02\x01\x00"[..]), Err(Error::Format(_))));
        assert!(matches!(read_tensor(&mut &b"TNSR\x01\x02\x00"[..]), Err(Error::Format(_))));
        assert!(matches!(
            read_tensor(&mut &b"TNSR\x01\x01\x01\x02\x00\x00\x00\x00"[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}

mod fuzz {
    use super::*;
    use proptest::prelude::*;

    fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut s = seed | 1;
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 2001) as f64 / 1000.0 - 1.0
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn shape_formulas_hold(
            n in 1usize..3, g in 1usize..3, cin_g in 1usize..3, cout_g in 1usize..3,
            k in prop::sample::select(vec![1usize, 3, 5]), stride in 1usize..4,
            h in 5usize..12, w in 5usize..12, seed in any::<u64>(),
        ) {
            let pad = k / 2;
            let spec = ConvSpec::new(stride, pad, g);
            let x = tensor(vec![n, cin_g * g, h, w], seed);
            let kern = tensor(vec![cout_g * g, cin_g, k, k], seed ^ 1);
            let y = conv2d_forward(&x, &kern, None, spec).unwrap();
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            prop_assert_eq!(y.shape(), &[n, cout_g * g, oh, ow]);
            prop_assert_eq!(conv_output_size(h, k, stride, pad).unwrap(), oh);

            let t_in = tensor(vec![n, cout_g, oh, ow], seed ^ 2);
            let t_kern = tensor(vec![cout_g, cin_g, k, k], seed ^ 3);
            let t = conv2d_transpose_forward(&t_in, &t_kern, None, ConvSpec::new(stride, pad, 1)).unwrap();
            let th = conv2d_transpose_output_size(oh, k, stride, pad).unwrap();
            prop_assert_eq!(th, (oh - 1) * stride + k + stride - 1 - 2 * pad);
            prop_assert_eq!(t.shape(), &[n, cin_g, th, (ow - 1) * stride + k + stride - 1 - 2 * pad]);

            let win = 1 + (seed % 3) as usize;
            let p = maxpool2d(&x, win, win).unwrap();
            prop_assert_eq!(p.shape(), &[n, cin_g * g, (h - win) / win + 1, (w - win) / win + 1]);
            let gap = global_avg_pool(&x).unwrap();
            prop_assert_eq!(gap.shape(), &[n, cin_g * g]);
        }

        #[test]
        fn transpose_is_adjoint(
            cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5]),
            stride in 1usize..3, size in 4usize..10, seed in any::<u64>(),
        ) {
            let spec = ConvSpec::new(stride, k / 2, 1);
            let x = tensor(vec![1, cin, size, size], seed);
            let kern = tensor(vec![cout, cin, k, k], seed ^ 5);
            let cx = conv2d_forward(&x, &kern, None, spec).unwrap();
            let y = tensor(cx.shape().to_vec(), seed ^ 9);
            let ty = conv2d_transpose_forward(&y, &kern, None, spec).unwrap();
            // The transpose output may exceed the input by output padding; compare the overlap.
            let (th, tw) = (ty.shape()[2], ty.shape()[3]);
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let mut rhs = 0.0;
            for c in 0..cin {
                for i in 0..size.min(th) {
                    for j in 0..size.min(tw) {
                        rhs += x.data()[(c * size + i) * size + j] * ty.data()[(c * th + i) * tw + j];
                    }
                }
            }
            prop_assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
        }
    }
}
