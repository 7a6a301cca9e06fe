//! The sample corpus and suite, and a checker for the correction loop
//! that drives it with random scripted drafts.

use std::path::PathBuf;

use archivist_core::corpus::{build_indexes, load_corpus, BuildConfig, HashEmbedder, IndexBundle};
use archivist_core::dataset::{load_suite, Task, TaskSuite};
use archivist_core::generation::{Condition, ExperimentCell, GenerationRecord, Template, Timing, RECORD_SCHEMA_VERSION};
use archivist_core::backend::{BackendError, CompletionBackend};
use archivist_core::retrieval::LexicalOverlapScorer;
use archivist_core::verification::{fidelity_and_correct, verify_output, LoopParams, Origin, VerifyContext, VerifyParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn sample_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/sample")
}

pub fn sample_bundle() -> IndexBundle {
    let corpus = load_corpus(&sample_dir().join("corpus")).unwrap();
    build_indexes(&corpus.docs, &HashEmbedder::new(256), &BuildConfig::default(), None).unwrap()
}

pub fn sample_suite() -> TaskSuite {
    load_suite(&sample_dir().join("tasks")).unwrap()
}

/// Sentences for task T01 that verify clean against the sample corpus.
pub const GOOD: &[&str] = &[
    "Conforme a la STS 452/2019, el plazo para recurrir en apelación es de caducidad.",
    "El art. 458 LEC dispone que el recurso de apelación se interpone ante el tribunal que dictó la resolución.",
    "La sentencia de instancia se notificó a la procuradora de la demandada el 4 de marzo de 2024.",
    "El escrito de interposición del recurso se presentó el 3 de abril de 2024 a las doce horas.",
    "El juzgado inadmitió el recurso por considerarlo presentado fuera de plazo.",
];

/// Sentences for task T01 that each hold exactly one failing item.
pub const BAD: &[&str] = &[
    "La STS 999/2025 declara que el plazo de apelación es de dos meses.",
    "La STS 123/2020 regula la compraventa de ganado bovino.",
    "La demandada había sido condenada a pagar 185.000 euros por facturas impagadas.",
    "La demandada transfirió su yate a una sociedad panameña.",
];

pub fn record(task: &str, output: &str) -> GenerationRecord {
    let cell = ExperimentCell::new(task, "scripted", Condition::AdvancedRag, 0.7, Template::Verification, 1);
    GenerationRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        record_id: format!("rec-{task}"),
        cell,
        prompt: "## Referencia\nT01\n".into(),
        output: output.into(),
        context_chunk_ids: vec![],
        timing: Timing { backend_calls: 1, ..Default::default() },
        correction_cycles: 0,
        correction: None,
    }
}

pub fn draft(rng: &mut ChaCha8Rng) -> String {
    let mut parts: Vec<&str> = GOOD.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
    parts.extend(BAD.iter().copied().filter(|_| rng.random_bool(0.4)));
    parts.shuffle(rng);
    parts.join(" ")
}

/// Answers every prompt with a random draft, seeded by the prompt text.
pub struct ChaosBackend(pub u64);

impl CompletionBackend for ChaosBackend {
    fn id(&self) -> &str {
        "chaos"
    }
    fn generate(&self, prompt: &str, _temperature: f64, seed: u64) -> Result<String, BackendError> {
        let h = Sha256::digest(format!("{}|{seed}|{prompt}", self.0).as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.into());
        Ok(draft(&mut rng))
    }
}

/// Runs the loop on one random record and checks that the fidelity trace
/// never drops, the final text still verifies to the reported fidelity,
/// and stripping only removed sentences and left a clean report.
pub fn loop_case_holds(seed: u64, task: &Task, bundle: &IndexBundle) -> Result<(), String> {
    let scorer = LexicalOverlapScorer;
    let cx = VerifyContext {
        task,
        bundle,
        context_chunk_ids: &[],
        scorer: &scorer,
        params: VerifyParams::default(),
        origin: Origin::Consultative,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rec = record(&task.id, &draft(&mut rng));
    while rec.output.is_empty() {
        rec.output = draft(&mut rng);
    }
    let params = LoopParams::default();
    let out = fidelity_and_correct(&rec, &ChaosBackend(seed), &cx, &params).map_err(|e| e.to_string())?;
    let s = &out.summary;
    if s.fidelity_trace.windows(2).any(|w| w[1] < w[0]) {
        return Err(format!("trace drops: {:?}", s.fidelity_trace));
    }
    if s.fidelity_trace.len() != out.record.correction_cycles as usize + 1 || out.record.correction_cycles > params.max_cycles {
        return Err(format!("{} cycles for trace {:?}", out.record.correction_cycles, s.fidelity_trace));
    }
    let again = verify_output(&rec.record_id, &out.record.output, &cx).map_err(|e| e.to_string())?;
    if again.fidelity != s.final_fidelity || out.report.fidelity != s.final_fidelity {
        return Err(format!("final fidelity {} does not re-verify ({})", s.final_fidelity, again.fidelity));
    }
    if s.final_fidelity < params.threshold && !again.is_clean() {
        return Err(format!("left below threshold at {}", s.final_fidelity));
    }
    if s.stripped_sentences > 0 {
        if !again.is_clean() {
            return Err("stripped text still has failing items".into());
        }
        let kept: Vec<&str> = archivist_core::text::sentences(&out.record.output);
        let pool: Vec<&str> = GOOD.iter().chain(BAD).copied().collect();
        if let Some(s) = kept.iter().find(|k| !pool.contains(k)) {
            return Err(format!("stripping produced new text: {s}"));
        }
    }
    Ok(())
}
