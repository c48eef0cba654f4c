//! Dataset construction: segmentation into clips, fixation density maps and
//! correlation-based flagging, manual annotation with agreement, class
//! balancing and splitting, and the manifest and frame file formats.

pub mod annotation;
pub mod density;
pub mod frames;
pub mod record;
pub mod segment;
pub mod split;

pub use annotation::{AgreementReport, AnnotationRecord, AnnotationStore, ProtocolRow};
pub use density::{Aggregation, Correlation, DensityMap, MapSpec};
pub use record::{
    read_manifest, write_manifest, Catalog, ClipRecord, FrameSource, Label, Scene, SourceDataset,
    TimeOfDay, Weather,
};
pub use split::{balance_and_split, Split};
