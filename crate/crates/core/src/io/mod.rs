//! Weight container, portable image formats and input preprocessing.

pub mod pnm;
pub mod preprocess;
pub mod weights;

pub use pnm::{read_image, write_image, write_mask, ImageBuffer, PnmError, PnmFormat};
pub use preprocess::{preprocess, Normalization};
pub use weights::{ParamMap, StoredTensor, WeightFormatError, WeightStore};
