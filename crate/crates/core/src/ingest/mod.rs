//! Activation dumps, labeled image directories and the holdout split.
//!
//! A dump is a directory holding `manifest.json` plus one or more shard
//! files. Each shard is a run of records:
//!
//! ```text
//! u32 LE image_id | u16 LE layer_id | tensor block (see `tensor`)
//! ```
//!
//! All records of one image are contiguous inside a single shard, and the
//! manifest points at the first of them. Shards carry CRC32 checksums.

mod dump;
mod images;
mod predictions;
mod split;

use serde::{Deserialize, Serialize};

use crate::tensor::{Shape3, Tensor3};

pub use dump::{
    write_dump, DumpManifest, DumpMetadata, DumpReader, DumpSummary, DumpWriter, ImageEntry,
    ImageRecords, LiveRecordProbe, ShardEntry, DUMP_FORMAT_VERSION, MANIFEST_FILE,
};
pub use images::{
    read_image_dir, read_image_file, write_image_dir, ImageDirEntry, ImageDirManifest,
    IMAGE_MANIFEST_FILE,
};
pub use predictions::{PredictionEntry, Predictions, PREDICTIONS_FILE};
pub use split::{split_dataset, DatasetSplit, SplitSide};

/// Feature-map geometry of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSchema {
    pub layer_id: u16,
    pub filter_count: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerSchema {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.filter_count, self.height, self.width)
    }
}

/// Everything a dump needs to know about the model that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpSchema {
    pub model_name: String,
    pub classes: Vec<String>,
    pub layers: Vec<LayerSchema>,
}

/// One image's feature maps at one convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub image_id: u32,
    pub class_label: u32,
    pub layer_id: u16,
    /// One channel per filter of the layer.
    pub feature_maps: Tensor3,
}
