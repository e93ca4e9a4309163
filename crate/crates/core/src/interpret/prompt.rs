//! Prompt construction for captioning and tag generation.

use super::InterpretError;

/// Prefix sent with conditional captioning requests; the captioner continues
/// it.
pub const CAPTION_PREFIX: &str = "A news photo of ";

/// Instruction block of the tag-generation prompt. Line breaks and the
/// double spaces between sentences are part of the template.
pub const TAG_SYSTEM_BLOCK: &str = "<s> [INST] <<SYS>>\n\
Please generate 10 short tags for a series of\n\
frames sampled from a YouTube news video based on\n\
the images and captions provided.  Please avoid \n\
generic words that describe the whole video, but\n\
emphasize the unique characteristics of these \n\
frames.  You may need to implicitly infer the\n\
meanings of the objects in the image description\n\
according to the video context.\n\
<</SYS>>\n";

const CAPTION_SLOT: &str = "Text caption: ";
const DESCRIPTION_SLOT: &str = "Image description: ";
const CLOSING: &str = "[/INST] </s>";

/// Joins texts into one slot line: each text is trimmed, internal line
/// breaks become spaces, empty texts are dropped.
fn join_slot<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|s| s.as_ref().split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fills the tag-generation template. Callers pass captions and
/// descriptions in pair-id order; the output depends only on those inputs.
pub fn build_cluster_prompt<S: AsRef<str>, T: AsRef<str>>(
    captions: &[S],
    descriptions: &[T],
) -> Result<String, InterpretError> {
    if captions.is_empty() && descriptions.is_empty() {
        return Err(InterpretError::Contract("a cluster prompt needs at least one caption or description".into()));
    }
    let mut out = String::from(TAG_SYSTEM_BLOCK);
    out.push_str(CAPTION_SLOT);
    out.push_str(&join_slot(captions));
    out.push('\n');
    out.push_str(DESCRIPTION_SLOT);
    out.push_str(&join_slot(descriptions));
    out.push('\n');
    out.push_str(CLOSING);
    Ok(out)
}

/// Splits a prompt built by [`build_cluster_prompt`] back into its caption
/// and description slots.
pub fn prompt_slots(prompt: &str) -> Option<(&str, &str)> {
    let mut caption = None;
    let mut description = None;
    for line in prompt.lines() {
        if let Some(rest) = line.strip_prefix(CAPTION_SLOT.trim_end()) {
            caption = Some(rest.trim_start());
        } else if let Some(rest) = line.strip_prefix(DESCRIPTION_SLOT.trim_end()) {
            description = Some(rest.trim_start());
        }
    }
    Some((caption?, description?))
}
