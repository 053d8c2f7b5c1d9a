//! Synthetic pairs and on-disk dataset ingestion.

mod ingest;
mod synth;

use std::path::PathBuf;

pub use ingest::{ingest_dataset, Layout, SampleDescriptor, SampleIndex};
pub use synth::{
    render_pair, render_with_transform, synth_batch, synth_pair, AffineTransform, SynthConfig, SynthPair, Texture,
    TextureField, TransformFamily,
};

use crate::error::Result;
use crate::flow::FlowField;
use crate::io::RgbImage;
use crate::tensor::{Element, Tensor};

/// Where a sample's ground truth came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Synthetic,
    Flo,
    KittiPng,
}

/// One frame pair with optional ground truth.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub image1: RgbImage,
    pub image2: RgbImage,
    /// `None` for inference-only samples.
    pub flow_gt: Option<FlowField<f64>>,
    pub source_path: Option<PathBuf>,
    pub format: SampleFormat,
}

impl FlowSample {
    pub fn has_ground_truth(&self) -> bool {
        self.flow_gt.is_some()
    }

    /// Both frames as `[1,3,H,W]` tensors in `[0, 1]`.
    pub fn tensors<T: Element>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        if (self.image1.width, self.image1.height) != (self.image2.width, self.image2.height) {
            return Err(crate::Error::shape(
                "sample",
                "width",
                self.image1.width,
                self.image2.width,
            ));
        }
        Ok((self.image1.to_tensor(), self.image2.to_tensor()))
    }
}
