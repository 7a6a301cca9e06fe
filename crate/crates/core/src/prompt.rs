//! Prompt assembly. Prompts are in Spanish, like the tasks and corpus.

use std::fmt::Write;

use crate::dataset::Task;
use crate::generation::{Condition, Template};
use crate::retrieval::RankedContext;
use crate::verification::FidelityReport;

pub const INSTRUCTION: &str = "Eres un abogado ejerciente en España. Redacta el escrito o dictamen que pide el encargo. \
Fundamenta cada afirmación jurídica en fuentes identificadas y no afirmes hechos que no consten en el material del caso.";

pub const SOURCES_HEADER: &str = "## Fuentes recuperadas";
pub const RULES_HEADER: &str = "## Reglas de anclaje";
pub const PREVIOUS_DRAFT_HEADER: &str = "## Borrador anterior";
pub const CORRECTION_HEADER: &str = "## Corrección requerida";

pub const ANCHORING_RULES: &str = "1. Antes de cada afirmación jurídica, cita la fuente que la sostiene con su etiqueta [S#] o su referencia completa.\n\
2. Después de la cita, enuncia la afirmación que la fuente respalda.\n\
3. Solo entonces desarrolla el argumento que se apoya en esa afirmación.\n\
4. Si ninguna fuente respalda una afirmación, omítela.\n\
5. No cites normas derogadas como vigentes.";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("condition {0} takes no retrieved context")]
    ContextForDirect(Condition),
    #[error("condition {0} needs a retrieved context")]
    MissingContext(Condition),
}

/// Source tag of the `i`-th context entry (0-based).
pub fn source_tag(i: usize) -> String {
    format!("S{}", i + 1)
}

pub fn build_prompt(
    task: &Task,
    condition: Condition,
    template: Template,
    context: Option<&RankedContext>,
) -> Result<String, PromptError> {
    match (condition, context) {
        (Condition::Direct, Some(_)) => return Err(PromptError::ContextForDirect(condition)),
        (Condition::CanonicalRag | Condition::AdvancedRag, None) => return Err(PromptError::MissingContext(condition)),
        _ => {}
    }
    let mut p = String::new();
    p.push_str(INSTRUCTION);
    p.push_str("\n\n");
    let _ = writeln!(p, "## Referencia\n{}\n", task.id);
    let _ = writeln!(p, "## Escenario\n{}\n", task.scenario.trim());
    let _ = writeln!(p, "## Escrito de partida\n{}\n", task.inputs.brief.trim());
    if !task.inputs.annexes.is_empty() {
        p.push_str("## Anexos\n");
        for a in &task.inputs.annexes {
            let _ = writeln!(p, "### {} ({})\n{}\n", a.title, a.id, a.text.trim());
        }
    }
    if let Some(ctx) = context {
        let _ = writeln!(p, "{SOURCES_HEADER}");
        for (i, e) in ctx.entries.iter().enumerate() {
            let status = if e.repealed { "; derogada" } else { "" };
            let flat = e.text.split_whitespace().collect::<Vec<_>>().join(" ");
            let _ = writeln!(p, "[{}] ({}{}) {}", source_tag(i), e.source, status, flat);
        }
        p.push('\n');
    }
    if template == Template::Verification {
        let _ = writeln!(p, "{RULES_HEADER}\n{ANCHORING_RULES}\n");
    }
    Ok(p)
}

/// Prompt for one correction cycle: the original prompt, the previous
/// draft, and every failing citation and claim.
pub fn correction_prompt(original: &str, draft: &str, report: &FidelityReport) -> String {
    let mut p = String::from(original.trim_end());
    let _ = write!(p, "\n\n{PREVIOUS_DRAFT_HEADER}\n{}\n\n{CORRECTION_HEADER}\n", draft.trim());
    p.push_str("Reescribe el borrador corrigiendo o suprimiendo los siguientes elementos:\n");
    for v in report.citation_verdicts.iter().filter(|v| v.status.is_false()) {
        let _ = writeln!(p, "- cita {}: {}", v.raw, v.status.as_str());
    }
    for v in report.fact_verdicts.iter().filter(|v| v.status.is_fabricated()) {
        let _ = writeln!(p, "- afirmación \"{}\": {}", v.text, v.status.as_str());
    }
    p
}

/// Items listed in a correction prompt's failing section, as written.
pub fn correction_items(prompt: &str) -> Vec<String> {
    let Some(pos) = prompt.rfind(CORRECTION_HEADER) else {
        return Vec::new();
    };
    prompt[pos..]
        .lines()
        .filter_map(|l| {
            let l = l.strip_prefix("- ")?;
            if let Some(rest) = l.strip_prefix("cita ") {
                rest.rsplit_once(": ").map(|(raw, _)| raw.to_string())
            } else {
                let rest = l.strip_prefix("afirmación \"")?;
                rest.rsplit_once("\": ").map(|(t, _)| t.to_string())
            }
        })
        .collect()
}

/// The draft embedded in a correction prompt.
pub fn previous_draft(prompt: &str) -> Option<&str> {
    let start = prompt.rfind(PREVIOUS_DRAFT_HEADER)? + PREVIOUS_DRAFT_HEADER.len();
    let end = prompt[start..].find(CORRECTION_HEADER)? + start;
    Some(prompt[start..end].trim())
}
