//! The VGG-style classifier and the convolutional auto-encoder.

use super::layers::LayerSpec;
use super::network::{infer_shapes, Network};
use super::tensor::Scalar;
use crate::error::{Error, Result};

const CLASSIFIER_DROPOUTS: (f64, f64) = (0.2, 0.35);

/// Scales a channel count, rounding up and never below one.
pub fn scale_channels(channels: usize, multiplier: f64) -> usize {
    ((channels as f64 * multiplier).ceil() as usize).max(1)
}

fn check_multiplier(m: f64) -> Result<()> {
    if m > 0.0 && m <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("width multiplier {m} outside (0, 1]")))
    }
}

/// Layer list of the classifier: conv blocks of 32-64, 128-128 and
/// 128-128(1x1) channels, a 1x1 conv to 256, four 2x2 max pools, dropout
/// 0.2 / 0.35 and a dense softmax head.
pub fn classifier_specs(width_multiplier: f64, n_classes: usize, input_size: (usize, usize)) -> Result<Vec<LayerSpec>> {
    check_multiplier(width_multiplier)?;
    if n_classes < 2 {
        return Err(Error::InvalidConfig("at least two classes required".into()));
    }
    let ch = |c| scale_channels(c, width_multiplier);
    let pool = || LayerSpec::MaxPool { window: 2, stride: 2 };
    let mut specs = vec![
        LayerSpec::conv(3, 1, ch(32)),
        LayerSpec::ReLU,
        LayerSpec::conv(3, ch(32), ch(64)),
        LayerSpec::ReLU,
        pool(),
        LayerSpec::Dropout { p: CLASSIFIER_DROPOUTS.0 },
        LayerSpec::conv(3, ch(64), ch(128)),
        LayerSpec::ReLU,
        LayerSpec::conv(3, ch(128), ch(128)),
        LayerSpec::ReLU,
        pool(),
        LayerSpec::conv(3, ch(128), ch(128)),
        LayerSpec::ReLU,
        LayerSpec::conv(1, ch(128), ch(128)),
        LayerSpec::ReLU,
        pool(),
        LayerSpec::conv(1, ch(128), ch(256)),
        LayerSpec::ReLU,
        pool(),
        LayerSpec::Dropout { p: CLASSIFIER_DROPOUTS.1 },
        LayerSpec::Flatten,
    ];
    let shapes = infer_shapes(&[1, input_size.0, input_size.1], &specs)?;
    let flat = shapes.last().expect("non-empty")[0];
    specs.push(LayerSpec::Dense { in_dim: flat, out_dim: n_classes });
    specs.push(LayerSpec::SoftmaxClassifier);
    Ok(specs)
}

pub fn build_classifier<T: Scalar>(
    width_multiplier: f64,
    n_classes: usize,
    input_size: (usize, usize),
    seed: u64,
) -> Result<Network<T>> {
    let specs = classifier_specs(width_multiplier, n_classes, input_size)?;
    Network::new(vec![1, input_size.0, input_size.1], specs, seed)
}

/// Encoder and decoder layer lists for square power-of-two images.
///
/// The encoder stacks `log2(size)` blocks of conv, ReLU, batch norm and 2x2
/// max pool (16, 32, 64, 128, 128, ... channels) down to 1x1, then a dense
/// projection to the latent space. The decoder maps the latent vector to
/// 512 units reshaped to 2x2x128 and alternates nearest-neighbour upsampling
/// with convolutions (128, 64, 32, 16, ... channels) back to full size; the
/// last convolution has one output channel and is followed by ReLU only.
pub fn autoencoder_specs(
    width_multiplier: f64,
    latent_dim: usize,
    input_size: (usize, usize),
) -> Result<(Vec<LayerSpec>, Vec<LayerSpec>)> {
    check_multiplier(width_multiplier)?;
    let (h, w) = input_size;
    if h != w || !h.is_power_of_two() || h < 4 {
        return Err(Error::Shape {
            layer: 0,
            msg: format!("auto-encoder needs a square power-of-two input of at least 4x4, got {h}x{w}"),
        });
    }
    if latent_dim == 0 {
        return Err(Error::InvalidConfig("latent_dim must be positive".into()));
    }
    let ch = |c| scale_channels(c, width_multiplier);
    let stages = h.trailing_zeros() as usize;

    let enc_channels = |i: usize| [16, 32, 64, 128].get(i).copied().unwrap_or(128);
    let mut encoder = Vec::new();
    let mut prev = 1;
    for i in 0..stages {
        let out = ch(enc_channels(i));
        encoder.extend([
            LayerSpec::conv(3, prev, out),
            LayerSpec::ReLU,
            LayerSpec::BatchNorm { channels: out },
            LayerSpec::MaxPool { window: 2, stride: 2 },
        ]);
        prev = out;
    }
    encoder.push(LayerSpec::Flatten);
    encoder.push(LayerSpec::Dense { in_dim: prev, out_dim: latent_dim });

    let dec_channels = |i: usize| [128, 64, 32, 16].get(i).copied().unwrap_or(16);
    let seed_ch = ch(128);
    let mut decoder = vec![
        LayerSpec::Dense { in_dim: latent_dim, out_dim: 4 * seed_ch },
        LayerSpec::ReLU,
        LayerSpec::Reshape { dims: vec![seed_ch, 2, 2] },
        LayerSpec::conv(3, seed_ch, seed_ch),
        LayerSpec::ReLU,
        LayerSpec::BatchNorm { channels: seed_ch },
    ];
    let mut prev = seed_ch;
    for i in 0..stages - 1 {
        let out = ch(dec_channels(i + 1));
        decoder.extend([
            LayerSpec::NNUpsample { factor: 2 },
            LayerSpec::conv(3, prev, out),
            LayerSpec::ReLU,
            LayerSpec::BatchNorm { channels: out },
        ]);
        prev = out;
    }
    decoder.push(LayerSpec::conv(3, prev, 1));
    decoder.push(LayerSpec::ReLU);

    let latent = infer_shapes(&[1, h, w], &encoder)?;
    let out = infer_shapes(latent.last().expect("non-empty"), &decoder)?;
    debug_assert_eq!(out.last().expect("non-empty"), &vec![1, h, w]);
    Ok((encoder, decoder))
}

pub fn build_autoencoder<T: Scalar>(
    width_multiplier: f64,
    latent_dim: usize,
    input_size: (usize, usize),
    seed: u64,
) -> Result<(Network<T>, Network<T>)> {
    let (enc, dec) = autoencoder_specs(width_multiplier, latent_dim, input_size)?;
    let encoder = Network::new(vec![1, input_size.0, input_size.1], enc, seed)?;
    let decoder = Network::new(vec![latent_dim], dec, crate::util::splitmix64(seed))?;
    Ok((encoder, decoder))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn table_view(specs: &[LayerSpec]) -> Vec<String> {
        specs
            .iter()
            .filter_map(|s| match s {
                LayerSpec::Conv { kernel, in_channels, out_channels, stride, .. } => {
                    Some(format!("Conv/s{stride} {kernel}x{kernel}x{in_channels}x{out_channels}"))
                }
                LayerSpec::MaxPool { window, stride } => Some(format!("MaxPool/s{stride} {window}x{window}")),
                LayerSpec::Dropout { p } => Some(format!("Dropout p={p}")),
                LayerSpec::Dense { out_dim, .. } => Some(format!("FC {out_dim}")),
                LayerSpec::SoftmaxClassifier => Some("Softmax".into()),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn full_width_classifier_matches_reference_table() {
        let specs = classifier_specs(1.0, 30, (32, 32)).unwrap();
        let expected = [
            "Conv/s1 3x3x1x32",
            "Conv/s1 3x3x32x64",
            "MaxPool/s2 2x2",
            "Dropout p=0.2",
            "Conv/s1 3x3x64x128",
            "Conv/s1 3x3x128x128",
            "MaxPool/s2 2x2",
            "Conv/s1 3x3x128x128",
            "Conv/s1 1x1x128x128",
            "MaxPool/s2 2x2",
            "Conv/s1 1x1x128x256",
            "MaxPool/s2 2x2",
            "Dropout p=0.35",
            "FC 30",
            "Softmax",
        ];
        assert_eq!(table_view(&specs), expected);
    }

    #[test]
    fn first_conv_parameter_counts() {
        let full = build_classifier::<f32>(1.0, 30, (32, 32), 0).unwrap();
        let first: usize = full.layers()[0].params.iter().map(|p| p.value.len()).sum();
        assert_eq!(first, 320);
        let quarter = build_classifier::<f32>(0.25, 30, (16, 16), 0).unwrap();
        let first: usize = quarter.layers()[0].params.iter().map(|p| p.value.len()).sum();
        assert_eq!(first, 80);
    }

    #[test]
    fn too_small_input_fails_at_the_fourth_pool() {
        match classifier_specs(1.0, 10, (8, 8)) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 18),
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(classifier_specs(1.0, 10, (16, 16)).is_ok());
    }

    #[test]
    fn autoencoder_latent_and_reconstruction_shapes() {
        for size in [16, 32] {
            let (enc, dec) = build_autoencoder::<f32>(0.25, 16, (size, size), 4).unwrap();
            assert_eq!(enc.output_shape(), vec![16]);
            let x = Tensor::zeros(vec![2, 1, size, size]);
            let z = enc.predict(&x).unwrap();
            assert_eq!(z.shape(), &[2, 16]);
            assert_eq!(dec.predict(&z).unwrap().shape(), &[2, 1, size, size]);
        }
    }

    #[test]
    fn autoencoder_at_full_width_matches_reference_figure() {
        let (enc, dec) = autoencoder_specs(1.0, 16, (32, 32)).unwrap();
        let convs = |specs: &[LayerSpec]| -> Vec<(usize, usize)> {
            specs
                .iter()
                .filter_map(|s| match s {
                    LayerSpec::Conv { in_channels, out_channels, .. } => Some((*in_channels, *out_channels)),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(convs(&enc), vec![(1, 16), (16, 32), (32, 64), (64, 128), (128, 128)]);
        assert_eq!(enc.iter().filter(|s| matches!(s, LayerSpec::MaxPool { .. })).count(), 5);
        assert_eq!(enc.last(), Some(&LayerSpec::Dense { in_dim: 128, out_dim: 16 }));
        assert_eq!(dec[0], LayerSpec::Dense { in_dim: 16, out_dim: 512 });
        assert_eq!(dec[2], LayerSpec::Reshape { dims: vec![128, 2, 2] });
        assert_eq!(convs(&dec).last(), Some(&(16, 1)));
        // Every conv but the last is followed by ReLU then batch norm.
        for specs in [&enc, &dec] {
            let conv_idx: Vec<usize> =
                specs.iter().enumerate().filter(|(_, s)| matches!(s, LayerSpec::Conv { .. })).map(|(i, _)| i).collect();
            for &i in &conv_idx {
                assert_eq!(specs[i + 1], LayerSpec::ReLU);
                let is_last = std::ptr::eq(specs, &dec) && i == *conv_idx.last().unwrap();
                if is_last {
                    assert_eq!(i + 2, specs.len());
                } else {
                    assert!(matches!(specs[i + 2], LayerSpec::BatchNorm { .. }));
                }
            }
        }
    }

    #[test]
    fn half_width_halves_channels() {
        let (full, _) = autoencoder_specs(1.0, 16, (32, 32)).unwrap();
        let (half, _) = autoencoder_specs(0.5, 16, (32, 32)).unwrap();
        for (a, b) in full.iter().zip(&half) {
            if let (LayerSpec::Conv { out_channels: x, .. }, LayerSpec::Conv { out_channels: y, .. }) = (a, b) {
                assert_eq!(*y, x.div_ceil(2));
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(autoencoder_specs(1.0, 16, (24, 24)).is_err());
        assert!(autoencoder_specs(1.0, 16, (16, 32)).is_err());
        assert!(classifier_specs(0.0, 10, (32, 32)).is_err());
        assert!(classifier_specs(1.5, 10, (32, 32)).is_err());
    }
}
