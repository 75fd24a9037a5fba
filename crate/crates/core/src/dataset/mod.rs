//! Image samples, MVTec-AD style directory I/O, synthetic defect datasets and
//! training-time augmentation.

mod augment;
mod mvtec;
mod synth;

use serde::{Deserialize, Serialize};

pub use augment::{augment_train, AugmentParams};
pub use mvtec::{load_mvtec_class, write_mvtec_layout, LoadOptions};
pub use synth::{
    generate_synthetic, paint_defect, render_texture, synthesize_anomalous, DefectKind,
    SynthDefectConfig, TextureKind,
};

use crate::error::{CpcError, Result};
use crate::raster::{BinaryMask, GrayImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Anomalous => "anomalous",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "anomalous" => Ok(Label::Anomalous),
            other => Err(CpcError::Config(format!("unknown label `{other}`"))),
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// Which half of a split a sample was read into. Only `Train` samples may
/// feed training or the test-time negative bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Train,
    Test,
}

/// Category folder name used for defect-free images.
pub const GOOD: &str = "good";

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: GrayImage,
    pub label: Label,
    pub gt_mask: Option<BinaryMask>,
    /// `<class>/<train|test>/<category>/<stem>`.
    pub source_id: String,
    /// `good` or the defect type.
    pub category: String,
    pub origin: Origin,
}

impl ImageSample {
    pub fn stem(&self) -> &str {
        self.source_id.rsplit('/').next().unwrap_or(&self.source_id)
    }

    /// `<class>/<category>/<stem>`, the identifier used in score tables.
    pub fn image_id(&self) -> String {
        let mut parts = self.source_id.split('/');
        let class = parts.next().unwrap_or_default();
        format!("{class}/{}/{}", self.category, self.stem())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pixels.in_unit_range() {
            return Err(CpcError::Config(format!("{}: intensities outside [0, 1]", self.source_id)));
        }
        if let Some(m) = &self.gt_mask {
            if m.height() != self.pixels.height() || m.width() != self.pixels.width() {
                return Err(CpcError::Shape(format!("{}: mask and image sizes differ", self.source_id)));
            }
        }
        match (self.origin, self.label, &self.gt_mask) {
            (Origin::Train, Label::Anomalous, _) | (Origin::Train, _, Some(_)) => Err(CpcError::Config(
                format!("{}: training samples must be normal and unmasked", self.source_id),
            )),
            (Origin::Test, Label::Anomalous, None) => Err(CpcError::Config(format!(
                "{}: anomalous test sample without mask",
                self.source_id
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub class_name: String,
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        for s in &self.train {
            if s.origin != Origin::Train {
                return Err(CpcError::Config(format!("{} is listed as training data", s.source_id)));
            }
            s.validate()?;
        }
        for s in &self.test {
            if s.origin != Origin::Test {
                return Err(CpcError::Config(format!("{} is listed as test data", s.source_id)));
            }
            s.validate()?;
        }
        Ok(())
    }

    /// Renames the class, rewriting every sample's source id to match.
    pub fn renamed(mut self, class_name: &str) -> Self {
        for s in self.train.iter_mut().chain(self.test.iter_mut()) {
            if let Some((_, rest)) = s.source_id.split_once('/') {
                s.source_id = format!("{class_name}/{rest}");
            }
        }
        self.class_name = class_name.to_string();
        self
    }

    pub fn anomalous_count(&self) -> usize {
        self.test.iter().filter(|s| s.label.is_anomalous()).count()
    }
}
