pub mod code_facts;
pub mod llm;
pub mod repo_semantics;
pub mod store;
pub mod taxonomy;
pub mod vuln_semantics;
pub mod similarity;
pub mod inspection;
pub mod verification;
