//! Layer-level descriptions of the two networks and their text manifest.
//!
//! A `VGG(x)` block is two 3×3 convolutions with `x` filters (each followed
//! by ReLU) and a 3×3 stride-2 max pool. `FC(y)` is a fully connected layer
//! of `y` ReLU neurons. `D-VGG(x)` unpools with the indices of its paired
//! `VGG` block and then applies two 3×3 convolutions. `SOFTMAX2` is the
//! two-way output: a dense 2-logit layer for the classifier, a pointwise
//! (1×1) 2-logit convolution for the segmenter.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PATCH: usize = 41;
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Vgg,
    Fc,
    DVgg,
    Softmax2,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Vgg => "VGG",
            LayerKind::Fc => "FC",
            LayerKind::DVgg => "D-VGG",
            LayerKind::Softmax2 => "SOFTMAX2",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VGG" => Ok(LayerKind::Vgg),
            "FC" => Ok(LayerKind::Fc),
            "D-VGG" => Ok(LayerKind::DVgg),
            "SOFTMAX2" => Ok(LayerKind::Softmax2),
            other => Err(Error::format(
                "network manifest",
                format!("unknown layer kind {other:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub width: usize,
}

impl LayerSpec {
    pub fn vgg(width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Vgg,
            width,
        }
    }

    pub fn fc(width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Fc,
            width,
        }
    }

    pub fn dvgg(width: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DVgg,
            width,
        }
    }

    pub fn softmax2() -> Self {
        LayerSpec {
            kind: LayerKind::Softmax2,
            width: 2,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind.as_str(), self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// One panel probability per patch.
    ScalarProbability,
    /// A 41×41 panel probability per pixel.
    DenseProbabilityMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    output: OutputKind,
}

/// Canonical encoder widths shared by both networks.
pub const ENCODER_WIDTHS: [usize; 3] = [64, 128, 128];
pub const CLASSIFIER_FC_WIDTHS: [usize; 2] = [128, 32];
pub const DECODER_WIDTHS: [usize; 3] = [128, 128, 64];

/// VGG(64), VGG(128), VGG(128), FC(128), FC(32), SOFTMAX2.
pub fn build_classifier() -> NetworkSpec {
    classifier_with(&ENCODER_WIDTHS, &CLASSIFIER_FC_WIDTHS).expect("canonical classifier is valid")
}

/// VGG(64), VGG(128), VGG(128), D-VGG(128), D-VGG(128), D-VGG(64), SOFTMAX2.
pub fn build_segmenter() -> NetworkSpec {
    segmenter_with(&ENCODER_WIDTHS, &DECODER_WIDTHS).expect("canonical segmenter is valid")
}

/// Classifier with custom (typically reduced) widths.
pub fn classifier_with(encoder: &[usize], fc: &[usize]) -> Result<NetworkSpec> {
    let layers = encoder
        .iter()
        .map(|&w| LayerSpec::vgg(w))
        .chain(fc.iter().map(|&w| LayerSpec::fc(w)))
        .chain(std::iter::once(LayerSpec::softmax2()))
        .collect();
    NetworkSpec::new(layers)
}

/// Segmenter with custom widths; `decoder[i]` is the width of the i-th D-VGG.
pub fn segmenter_with(encoder: &[usize], decoder: &[usize]) -> Result<NetworkSpec> {
    let layers = encoder
        .iter()
        .map(|&w| LayerSpec::vgg(w))
        .chain(decoder.iter().map(|&w| LayerSpec::dvgg(w)))
        .chain(std::iter::once(LayerSpec::softmax2()))
        .collect();
    NetworkSpec::new(layers)
}

impl NetworkSpec {
    /// Validates the layer ordering rules and infers the output kind.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::invalid(format!("network spec: {msg}")));
        let Some((last, body)) = layers.split_last() else {
            return bad("no layers");
        };
        if last.kind != LayerKind::Softmax2 || last.width != 2 {
            return bad("last layer must be SOFTMAX2");
        }
        if layers.iter().any(|l| l.width == 0) {
            return bad("layer widths must be positive");
        }
        let n_vgg = body.iter().take_while(|l| l.kind == LayerKind::Vgg).count();
        if n_vgg == 0 {
            return bad("at least one VGG block is required");
        }
        let rest = &body[n_vgg..];
        let output = if rest.iter().all(|l| l.kind == LayerKind::Fc) {
            OutputKind::ScalarProbability
        } else if rest.iter().all(|l| l.kind == LayerKind::DVgg) {
            if rest.len() != n_vgg {
                return bad("each VGG block needs exactly one D-VGG partner");
            }
            OutputKind::DenseProbabilityMap
        } else {
            return bad("VGG blocks must be followed only by FC layers or only by D-VGG layers");
        };
        // spatial size must survive every pool: 41 -> 20 -> 9 -> 4 -> 1
        let mut size = PATCH;
        for _ in 0..n_vgg {
            if size < 3 {
                return bad("too many VGG blocks for a 41x41 input");
            }
            size = (size - 3) / 2 + 1;
        }
        Ok(NetworkSpec { layers, output })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [PATCH, PATCH, CHANNELS]
    }

    pub fn encoder(&self) -> &[LayerSpec] {
        let n = self.layers.iter().take_while(|l| l.kind == LayerKind::Vgg).count();
        &self.layers[..n]
    }

    /// Spatial side lengths after each encoder pool, starting with the input.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![PATCH];
        for _ in self.encoder() {
            let s = *sizes.last().unwrap();
            sizes.push((s - 3) / 2 + 1);
        }
        sizes
    }

    /// Plain-text manifest: one `KIND width` line per layer.
    pub fn to_manifest(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{} {}\n", l.kind.as_str(), l.width))
            .collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(kind), Some(width), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(
                    "network manifest",
                    format!("line {}: expected `KIND width`", i + 1),
                ));
            };
            let width = width
                .parse()
                .map_err(|_| Error::format("network manifest", format!("line {}: bad width {width:?}", i + 1)))?;
            layers.push(LayerSpec {
                kind: kind.parse()?,
                width,
            });
        }
        NetworkSpec::new(layers)
    }
}
