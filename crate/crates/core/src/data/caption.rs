//! Caption cleaning: remove style, color, material and lighting words.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words the mock rewriter deletes: color names plus the lighting, material
/// and rendering adjectives the rewriting prompt lists.
pub const BANNED_WORDS: &[&str] = &[
    "red", "blue", "green", "yellow", "orange", "purple", "violet", "pink", "brown", "black", "white", "gray", "grey",
    "golden", "silver", "beige", "cyan", "magenta", "teal", "navy", "shiny", "glossy", "matte", "dark", "bright", "dim",
    "light", "light-colored", "dark-colored", "colorful", "realistic", "photorealistic", "vivid", "pale", "pastel",
    "neon", "glowing", "plain", "neutral", "wooden", "metallic", "glass", "velvet", "textured", "smooth", "rough",
    "sunny", "moody", "cinematic", "vintage", "soft", "warm", "cool", "muted", "saturated",
];

pub trait Rewriter {
    fn rewrite(&self, raw: &str) -> Result<String>;
}

/// Deletes banned tokens (case-insensitive, ignoring surrounding
/// punctuation) and collapses whitespace.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockRewriter;

impl Rewriter for MockRewriter {
    fn rewrite(&self, raw: &str) -> Result<String> {
        let kept: Vec<&str> = raw
            .split_whitespace()
            .filter(|tok| {
                let core = tok.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase();
                !BANNED_WORDS.contains(&core.as_str())
            })
            .collect();
        Ok(kept.join(" "))
    }
}

/// Rewriter backed by an HTTP endpoint: `{"prompt": ..}` in, `{"text": ..}` out.
#[derive(Clone, Debug)]
pub struct RemoteRewriter {
    pub url: String,
    pub timeout_secs: u64,
}

pub const REWRITE_PROMPT: &str = "Keep all factual and visual details about objects, people, scenes, and actions.\n\
Remove all references to style, color, texture, material, lighting, or atmosphere, such as:\n\
red, blue, green, shiny, dark, bright, realistic, light-colored, etc.\n\
Do not add new information.\n\
Output only the cleaned description.\n\n\
Based on the rules above, rewrite the following description in English:\n";

#[derive(Serialize)]
struct RewriteRequest<'a> {
    prompt: String,
    caption: &'a str,
}

#[derive(Deserialize)]
struct RewriteResponse {
    text: String,
}

impl Rewriter for RemoteRewriter {
    fn rewrite(&self, raw: &str) -> Result<String> {
        let body = RewriteRequest {
            prompt: format!("{REWRITE_PROMPT}{raw}"),
            caption: raw,
        };
        let resp: RewriteResponse = ureq::post(&self.url)
            .timeout(std::time::Duration::from_secs(self.timeout_secs))
            .send_json(&body)
            .map_err(|e| Error::Judge(format!("rewriter at {}: {e}", self.url)))?
            .into_json()
            .map_err(|e| Error::Judge(format!("rewriter response: {e}")))?;
        Ok(resp.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanCaption {
    pub text: String,
    /// Set when the rewriter failed and `text` is the raw caption.
    pub flagged: bool,
}

pub fn clean_caption(raw: &str, rewriter: &dyn Rewriter) -> CleanCaption {
    match rewriter.rewrite(raw) {
        Ok(text) => CleanCaption { text, flagged: false },
        Err(e) => {
            log::warn!("caption kept raw: {e}");
            CleanCaption {
                text: raw.to_string(),
                flagged: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Down;

    impl Rewriter for Down {
        fn rewrite(&self, _: &str) -> Result<String> {
            Err(Error::Judge("offline".into()))
        }
    }

    #[test]
    fn banned_words_are_removed() {
        let c = clean_caption("a red ball on a bright table", &MockRewriter);
        assert_eq!(c.text, "a ball on a table");
        assert!(!c.flagged);
        assert_eq!(clean_caption("a child holds flowers", &MockRewriter).text, "a child holds flowers");
        assert_eq!(clean_caption("", &MockRewriter).text, "");
        assert_eq!(
            clean_caption("A White dress,  plain   background.", &MockRewriter).text,
            "A dress, background."
        );
    }

    #[test]
    fn failing_rewriter_keeps_raw_with_flag() {
        let c = clean_caption("a red ball", &Down);
        assert_eq!(c.text, "a red ball");
        assert!(c.flagged);
    }
}
