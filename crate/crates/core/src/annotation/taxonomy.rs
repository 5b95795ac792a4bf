use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyClass {
    /// Single letter, `A` to `G`.
    pub letter: char,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    /// E.g. `A.4`.
    pub code: String,
    pub class: char,
    pub name: String,
    pub description: String,
}

/// Fixed capability taxonomy: 7 classes, 30 categories numbered
/// continuously across classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<TaxonomyClass>,
    pub categories: Vec<Category>,
}

const CLASSES: [(char, &str); 7] = [
    ('A', "Safety & Content Moderation"),
    ('B', "Linguistic Capabilities"),
    ('C', "Information Processing"),
    ('D', "User Interaction Management"),
    ('E', "Format & Structure Control"),
    ('F', "Error Handling & Quality Control"),
    ('G', "Specialized Capabilities"),
];

const CATEGORIES: [(&str, &str, &str); 30] = [
    ("A.1", "Harmful Content Detection", "Identifies requests for violence, weapons, extremist content, or illegal activities. Activates when encountering text promoting harm or discrimination."),
    ("A.2", "Request Refusal Mechanisms", "Recognizes when to decline inappropriate requests. Provides explanations about ethical guidelines and limitations."),
    ("A.3", "Jailbreak Detection", "Identifies attempts to circumvent safety measures. Recognizes patterns like \"evil trusted confidant\" or constraint-based prompting."),
    ("A.4", "Sexual Content Filtering", "Detects explicit sexual content requests, especially involving inappropriate scenarios. Identifies content with taboo themes or non-consensual elements."),
    ("A.5", "Minor Protection", "Specifically focuses on protecting children in content generation. Detects requests involving minors in inappropriate contexts."),
    ("A.6", "Stereotype & Bias Detection", "Identifies racial, ethnic, or religious stereotyping. Detects when users request content that promotes discrimination."),
    ("B.7", "Multilingual Processing", "Identifies non-English languages in queries. Activates language-specific response modes across multiple scripts and languages."),
    ("B.8", "Translation & Language Switching", "Detects requests for translation between languages. Manages language transitions within conversations."),
    ("B.9", "Grammar & Style Analysis", "Evaluates grammatical correctness and writing quality. Identifies spelling, syntax, and structural issues in text."),
    ("C.10", "Summarization & Condensing", "Detects requests to summarize longer content. Extracts key information while preserving core meaning."),
    ("C.11", "Entity Recognition & Extraction", "Identifies specific entities (people, organizations, terms) in text. Organizes and categorizes information from unstructured content."),
    ("C.12", "Factual Verification", "Checks consistency between summaries and source content. Verifies whether claims align with provided information."),
    ("C.13", "Knowledge Boundary Recognition", "Identifies when information falls outside the model's knowledge. Detects when the model should acknowledge limitations rather than confabulate."),
    ("D.14", "Query Classification", "Categorizes types of user requests (questions, instructions, etc.). Determines appropriate response strategies."),
    ("D.15", "Clarification Mechanisms", "Detects ambiguous or vague queries requiring additional context. Manages follow-up questioning to gather necessary information."),
    ("D.16", "Instruction Following", "Processes and adheres to specific user instructions. Detects when constraints or formatting requirements are provided."),
    ("D.17", "Conversation Management", "Tracks conversation history and references to previous exchanges. Maintains context across multiple turns."),
    ("E.18", "Structured Output Generation", "Formats responses as lists, tables, or other organized structures. Maintains consistent formatting patterns."),
    ("E.19", "JSON & API Integration", "Converts text into machine-readable formats like JSON. Structures information for downstream processing."),
    ("E.20", "Template Following", "Detects and continues patterns established by examples. Adapts output to match specified formats."),
    ("F.21", "Self-Correction Mechanisms", "Detects and acknowledges mistakes in previous responses. Provides corrections when errors are identified."),
    ("F.22", "Hallucination Detection", "Identifies when the model is generating fabricated information. Recognizes factual inaccuracies in model outputs."),
    ("F.23", "Truncation Awareness", "Detects when responses are about to be cut off. Identifies incomplete or abruptly ending content."),
    ("G.24", "Code Generation & Analysis", "Produces programming code across multiple languages. Identifies errors or inconsistencies in code snippets."),
    ("G.25", "Professional Communication", "Generates formal business content (emails, reports, etc.). Adapts tone for workplace and professional contexts."),
    ("G.26", "Educational Explanation", "Simplifies complex topics for different knowledge levels. Provides 'Explain Like I'm 5' (ELI5) content."),
    ("G.27", "Creative Generation", "Produces narratives, stories, and creative writing. Manages character development and dialogue."),
    ("G.28", "Role-Playing & Persona Adoption", "Adapts to specified character constraints. Maintains consistent persona characteristics."),
    ("G.29", "Text Transformation", "Edits, improves, and reformats existing content. Enhances clarity and readability while preserving meaning."),
    ("G.30", "Model Self-Reference", "Describes the model's own nature and capabilities. Manages disclosures about AI identity and limitations."),
];

impl Default for Taxonomy {
    fn default() -> Self {
        Self::standard()
    }
}

impl Taxonomy {
    /// The built-in capability taxonomy.
    pub fn standard() -> Self {
        Self {
            classes: CLASSES
                .iter()
                .map(|&(letter, name)| TaxonomyClass { letter, name: name.into() })
                .collect(),
            categories: CATEGORIES
                .iter()
                .map(|&(code, name, description)| Category {
                    code: code.into(),
                    class: code.chars().next().unwrap(),
                    name: name.into(),
                    description: description.into(),
                })
                .collect(),
        }
    }

    pub fn category(&self, code: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.code == code)
    }

    pub fn class(&self, letter: char) -> Option<&TaxonomyClass> {
        self.classes.iter().find(|c| c.letter == letter)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.category(code).is_some()
    }
}
