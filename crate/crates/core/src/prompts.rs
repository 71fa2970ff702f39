//! System prompt templates, embedded verbatim and pinned by SHA-256.

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: &'static str,
    pub version: u32,
    pub text: &'static str,
    pub sha256: &'static str,
}

impl PromptTemplate {
    pub fn verify(&self) -> bool {
        sha256_hex(self.text.as_bytes()) == self.sha256
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub const PAGE_NAVIGATOR: PromptTemplate = PromptTemplate {
    name: "page_navigator",
    version: 1,
    text: include_str!("../prompts/page_navigator.md"),
    sha256: "96ec4bdf1034a2f946664a4d6506fb11170d9bd33f516d0eb37d3221da1dea56",
};

pub const ANSWER_SAMPLER: PromptTemplate = PromptTemplate {
    name: "answer_sampler",
    version: 1,
    text: include_str!("../prompts/answer_sampler.md"),
    sha256: "67367860ce5b74d5615e36a6e4d9e810a83f7ff80f3608a8a11cf882ee5609f8",
};

pub const ADJUDICATOR: PromptTemplate = PromptTemplate {
    name: "adjudicator",
    version: 1,
    text: include_str!("../prompts/adjudicator.md"),
    sha256: "ffb4f84bdfbf1b7db1d3be323b0dcb538c885bc5fe69043b9c4a20af010264f4",
};

/// Free-form answer to structured answer extraction, for llm-assisted scoring.
pub const ANSWER_EXTRACTION: PromptTemplate = PromptTemplate {
    name: "answer_extraction",
    version: 1,
    text: include_str!("../prompts/answer_extraction.md"),
    sha256: "cb8ccda861ad7aeef8635ad5169fd86a27ed29d0dcbfd20611efc1f4bd596d59",
};

/// Prediction vs. ground truth judge returning `{score, reasoning}`.
pub const ANSWER_JUDGE: PromptTemplate = PromptTemplate {
    name: "answer_judge",
    version: 1,
    text: include_str!("../prompts/answer_judge.md"),
    sha256: "85d010e89973bd803c09a13b9694d30c88bc735927d48985c5bf185cb28329c3",
};

pub const ALL: [PromptTemplate; 5] = [
    PAGE_NAVIGATOR,
    ANSWER_SAMPLER,
    ADJUDICATOR,
    ANSWER_EXTRACTION,
    ANSWER_JUDGE,
];

/// Names the template a system prompt was built from, if any.
pub fn identify(system_prompt: &str) -> Option<&'static str> {
    ALL.iter().find(|t| t.text == system_prompt).map(|t| t.name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksums_are_pinned() {
        for t in ALL {
            assert!(t.verify(), "{} checksum drifted", t.name);
        }
    }

    #[test]
    fn templates_carry_their_output_contracts() {
        assert!(PAGE_NAVIGATOR
            .text
            .contains("exactly three fields: analysis (string), located_pages (string), and prediction (string)"));
        assert!(PAGE_NAVIGATOR.text.contains("\"[3, 10, 12]\""));
        assert!(ANSWER_SAMPLER.text.contains("exactly two fields: analysis (string), and prediction (string)"));
        assert!(ANSWER_SAMPLER
            .text
            .contains("---- Zoomed-in Figures and Charts of this page ----"));
        assert!(ADJUDICATOR.text.contains("**List of Agent Analyses and Answers:**"));
        assert!(ANSWER_JUDGE.text.contains("score: A float, either 1.0"));
    }

    #[test]
    fn identify_by_exact_text() {
        assert_eq!(identify(ADJUDICATOR.text), Some("adjudicator"));
        assert_eq!(identify("something else"), None);
    }
}
