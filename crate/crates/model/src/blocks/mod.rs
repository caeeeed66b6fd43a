pub mod alss;
pub mod conv;
pub mod head;
pub mod msca;
pub mod sppf;

pub use alss::{calibrate_alss, Alss, AlssConfig, AlssWidths};
pub use conv::{conv_bn_act_params, Conv2d, ConvBnAct};
pub use head::{assemble_instance_mask, decode, dfl_expectation, soft_mask, Detection, HeadOutput, SegmentHead, SegmentHeadConfig};
pub use msca::{Msca, MscaConfig};
pub use sppf::Sppf;
