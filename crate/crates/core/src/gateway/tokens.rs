//! Input-token estimation.
//!
//! Used when a provider reports no usage, and by the budget estimator.
//! Stated approximations: an image costs `ceil(w/16) * ceil(h/16)` tokens,
//! text costs `ceil(bytes/4)`.

use crate::grounding::PromptBundle;

pub fn image_tokens(width: u32, height: u32) -> u64 {
    (width as u64).div_ceil(16) * (height as u64).div_ceil(16)
}

pub fn text_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

/// Estimated input tokens for a full bundle (all images plus the prompt).
pub fn bundle_input_tokens(bundle: &PromptBundle) -> u64 {
    let image_sum: u64 = bundle
        .images
        .iter()
        .map(|img| image_tokens(img.width(), img.height()))
        .sum();
    image_sum + text_tokens(&bundle.text)
}
