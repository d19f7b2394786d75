//! Property-based invariants over the codec, PPM format, and few-shot
//! subset sampling.

use ndarray::Array3;
use proptest::prelude::*;

use edit2interp::conditioning::{decode_latent, encode_image, CodecConfig, Image};
use edit2interp::data::{few_shot_sample, generate_synthetic, GenConfig};
use edit2interp::ppm::{decode_ppm, encode_ppm};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// decode(encode(img)) is the identity up to numeric noise for any
    /// codec-compatible image.
    #[test]
    fn codec_round_trip(
        seed in 0u64..1000,
        cells_h in 1usize..5,
        cells_w in 1usize..5,
        patch in 1usize..4,
    ) {
        let codec = CodecConfig { patch_factor: patch, mix_seed: seed };
        let (h, w) = (cells_h * patch, cells_w * patch);
        let img = edit2interp::conditioning::random_image(h, w, seed);
        let back = decode_latent(&encode_image(&img, &codec).unwrap(), &codec).unwrap();
        for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    /// PPM encoding round-trips exactly on 8-bit-quantized pixel values.
    #[test]
    fn ppm_round_trip(seed in 0u64..1000, h in 1usize..12, w in 1usize..12) {
        let img = edit2interp::conditioning::random_image(h, w, seed);
        let quantized = Image::new(Array3::from_shape_fn((h, w, 3), |ix| {
            (img.pixels[ix] * 255.0).round() / 255.0
        }));
        let bytes = encode_ppm(&quantized);
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&back), bytes);
    }

    /// Few-shot subsets of the same dataset are nested: the N-sample subset
    /// is a prefix of the (N+k)-sample subset under the same seed.
    #[test]
    fn few_shot_subsets_nest(n1 in 1usize..5, extra in 0usize..4, seed in 0u64..100) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { image_size: 8, n_triplets: 8, ..GenConfig::default() };
        let manifest = generate_synthetic(&cfg, dir.path()).unwrap();
        let small = few_shot_sample(&manifest, n1, seed).unwrap();
        let large = few_shot_sample(&manifest, n1 + extra, seed).unwrap();
        for (a, b) in small.entries.iter().zip(large.entries.iter()) {
            prop_assert_eq!(&a.id, &b.id);
        }
    }
}
