/// Characters per token assumed by the estimator.
const CHARS_PER_TOKEN: f64 = 3.5;
/// Safety margin applied on top of the character heuristic.
const MARGIN: f64 = 1.10;

/// Conservative token estimate: `ceil(chars / 3.5 * 1.1)`.
///
/// Deliberately over-counts relative to BPE tokenizers, which average closer
/// to four characters per token on source code and English prose.
pub fn estimate_tokens(text: &str) -> usize {
    let chars = text.chars().count();
    if chars == 0 {
        return 0;
    }
    (chars as f64 / CHARS_PER_TOKEN * MARGIN).ceil() as usize
}
