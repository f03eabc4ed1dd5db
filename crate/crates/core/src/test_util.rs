use crate::features::{FeatureRecord, FrequencyStats, TemplateKind, TemplateVerdict};

pub fn record(duplicate_count: u64, kind: TemplateKind) -> FeatureRecord {
    FeatureRecord {
        sample_id: 0,
        duplicate_count,
        prompt_duplicate_count: duplicate_count,
        frequency_stats: FrequencyStats::default(),
        huffman_bits: 64,
        template: match kind {
            TemplateKind::None => TemplateVerdict::NONE,
            k => TemplateVerdict::new(k, 1),
        },
        semantic_match_count: 0,
        textual_match_count: 0,
        prompt_perplexity: None,
        continuation_perplexity: None,
        full_perplexity: None,
        memorized: None,
        modality: None,
        taxonomy: None,
    }
}
