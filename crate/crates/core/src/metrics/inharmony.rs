use crate::autograd::ParamStore;
use crate::error::Result;
use crate::extractor::{extract_domain_code, ExtractorNet};
use crate::nn::RegionMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Distance between the background code and the foreground code of one image.
pub fn inharmony_score<T: Scalar>(
    image: &Tensor<T>,
    fg_mask: &RegionMask,
    net: &ExtractorNet,
    store: &ParamStore<T>,
) -> Result<T> {
    let background = extract_domain_code(image, &fg_mask.complement(), net, store)?;
    let foreground = extract_domain_code(image, fg_mask, net, store)?;
    background.distance(&foreground)
}
