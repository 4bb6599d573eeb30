use serde::{Deserialize, Serialize};

use super::descriptions::ClassRecord;
use crate::error::{Error, Result};
use crate::semantic::tokenizer::{ExtendedTokenizer, IMAGE_TOKEN};

/// Instruction wrapped around a class description. `{image}` becomes the image
/// placeholder token, `{description}` the class paragraph, `{class}` the name.
pub const PROMPT_TEMPLATE: &str = "{image}. This one is a query image. {description} This paragraph \
outlines the visual features of {class} that distinguish it from other similar categories. Please use \
distinguishing visual features to segment {class} in the query image.";

/// Expected answer; the segmentation token is appended after it.
pub const ANSWER_PREFIX: &str = "Sure, the segmentation result is";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub tokens: Vec<u32>,
    pub image_slot: usize,
    pub target_suffix: Vec<u32>,
}

pub fn prompt_text(record: &ClassRecord) -> String {
    PROMPT_TEMPLATE
        .replace("{image}", IMAGE_TOKEN)
        .replace("{description}", record.description.trim())
        .replace("{class}", &record.class_name)
}

pub fn build_prompt(record: &ClassRecord, tokenizer: &ExtendedTokenizer) -> Result<PromptSequence> {
    let image_id = tokenizer.image_token_id();
    let sem_id = tokenizer.sem_token_id();
    let mut tokens = vec![tokenizer.bos_id()];
    tokens.extend(tokenizer.encode(&prompt_text(record)));
    let slots: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == image_id)
        .map(|(i, _)| i)
        .collect();
    let [image_slot] = slots[..] else {
        return Err(Error::MissingImageSlot);
    };
    let mut target_suffix = tokenizer.encode(ANSWER_PREFIX);
    target_suffix.push(sem_id);
    Ok(PromptSequence {
        tokens,
        image_slot,
        target_suffix,
    })
}
