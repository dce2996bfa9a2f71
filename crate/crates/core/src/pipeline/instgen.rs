//! Instruction generation for mined function pairs.

use super::FunctionPair;
use crate::error::{Error, Result};
use crate::minilang::format_code;

const GENERATE_INST_HEAD: &str = "Create a single very short (maximum two sentences) not detailed functionality description that \n\
could be used as a prompt to generate either of the code snippets below. Always include the \n\
name of the programming language in the instruction. My life depends on the instruction being \n\
short and undetailed, excluding any security-specific features: \n\
\n\
Snippet 1:\n";

/// The instruction-generation prompt with both snippets interpolated.
pub fn generate_inst_prompt(o_sec: &str, o_vul: &str) -> String {
    format!("{GENERATE_INST_HEAD}{o_sec}\n\nSnippet 2:\n{o_vul}")
}

pub trait InstGenerator {
    fn generate(&self, pair: &FunctionPair) -> Result<String>;
}

/// `Write a {language} function named {name}.`
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateGenerator;

impl InstGenerator for TemplateGenerator {
    fn generate(&self, pair: &FunctionPair) -> Result<String> {
        if pair.name.is_empty() {
            return Err(Error::InvalidSample("function pair has no name".into()));
        }
        Ok(format!(
            "Write a {} function named {}.",
            pair.language, pair.name
        ))
    }
}

/// Transport to a text-completion service.
pub trait CompletionClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Asks a completion service for the instruction, falling back to the
/// template when the call fails or returns nothing.
pub struct PromptingGenerator<C> {
    pub client: C,
}

impl<C: CompletionClient> InstGenerator for PromptingGenerator<C> {
    fn generate(&self, pair: &FunctionPair) -> Result<String> {
        let sec: Vec<&str> = pair.secure.iter().map(String::as_str).collect();
        let vul: Vec<&str> = pair.vulnerable.iter().map(String::as_str).collect();
        let prompt =
            generate_inst_prompt(format_code(&sec).trim_end(), format_code(&vul).trim_end());
        match self.client.complete(&prompt) {
            Ok(text) if !text.trim().is_empty() => Ok(text.trim().to_string()),
            Ok(_) => {
                log::warn!("{}: empty completion, using template", pair.name);
                TemplateGenerator.generate(pair)
            }
            Err(e) => {
                log::warn!("{}: completion failed ({e}), using template", pair.name);
                TemplateGenerator.generate(pair)
            }
        }
    }
}

pub fn generate_inst(pair: &FunctionPair, gen: &dyn InstGenerator) -> Result<String> {
    let text = gen.generate(pair)?;
    if text.trim().is_empty() {
        return Err(Error::InvalidSample(
            "generated instruction is empty".into(),
        ));
    }
    Ok(text)
}
