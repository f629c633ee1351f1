use std::collections::{BTreeMap, HashSet};

use super::{
    build_request, call_endpoint, normalize, offline_paraphrase, parse_and_validate, AugmentError, ClientConfig,
    GeneratedPromptBatch,
};
use crate::data::{derive_seed, DataError, Family, Origin, PromptTemplate};

/// Where paraphrases come from.
pub trait PromptSource {
    fn paraphrase(
        &mut self,
        trigger: &PromptTemplate,
        demos: &[(String, Vec<String>)],
        n: usize,
        seed: u64,
    ) -> Result<GeneratedPromptBatch, AugmentError>;
}

/// The deterministic rule-based rewriter.
#[derive(Clone, Copy, Debug, Default)]
pub struct OfflineSource;

impl PromptSource for OfflineSource {
    fn paraphrase(
        &mut self,
        trigger: &PromptTemplate,
        _demos: &[(String, Vec<String>)],
        n: usize,
        seed: u64,
    ) -> Result<GeneratedPromptBatch, AugmentError> {
        offline_paraphrase(&trigger.text, n, seed)
    }
}

/// A chat-completion endpoint.
#[derive(Clone, Debug)]
pub struct LiveSource {
    pub config: ClientConfig,
}

impl PromptSource for LiveSource {
    fn paraphrase(
        &mut self,
        trigger: &PromptTemplate,
        demos: &[(String, Vec<String>)],
        n: usize,
        _seed: u64,
    ) -> Result<GeneratedPromptBatch, AugmentError> {
        let req = build_request(&trigger.text, demos, n, &self.config.model, &self.config.endpoint)?;
        let text = call_endpoint(&req, &self.config)?;
        parse_and_validate(&text, &trigger.text)
    }
}

fn demonstrations(trigger: &PromptTemplate, all: &[PromptTemplate], seed: u64) -> Vec<(String, Vec<String>)> {
    let mut demos: Vec<(String, Vec<String>)> = all
        .iter()
        .filter(|t| t.family == trigger.family && t.id != trigger.id)
        .take(2)
        .filter_map(|t| {
            offline_paraphrase(&t.text, 3, seed)
                .ok()
                .map(|b| (t.text.clone(), b.accepted))
        })
        .collect();
    if demos.is_empty() {
        if let Ok(b) = offline_paraphrase(&trigger.text, 3, seed) {
            demos.push((trigger.text.clone(), b.accepted));
        }
    }
    demos
}

/// Triggers plus generated paraphrases, `per_group` templates per group.
/// Split flags are left unset.
pub fn build_registry(
    triggers: &[PromptTemplate],
    per_group: usize,
    source: &mut dyn PromptSource,
    seed: u64,
) -> Result<Vec<PromptTemplate>, AugmentError> {
    let mut groups: BTreeMap<(Family, u32), Vec<&PromptTemplate>> = BTreeMap::new();
    for t in triggers {
        t.validate()?;
        if t.origin != Origin::Trigger {
            return Err(DataError::Template {
                template: t.id.clone(),
                message: "not a trigger".into(),
            }
            .into());
        }
        groups.entry((t.family, t.group)).or_default().push(t);
    }
    let mut out = Vec::new();
    for ((family, group), members) in groups {
        if members.len() > per_group {
            return Err(AugmentError::Config(format!(
                "group {family}/{group} already has {} triggers, more than {per_group}",
                members.len()
            )));
        }
        let need = per_group - members.len();
        let mut seen: HashSet<String> = members.iter().map(|t| normalize(&t.text)).collect();
        let mut pools: Vec<Vec<String>> = Vec::new();
        for (i, t) in members.iter().enumerate() {
            let share = need / members.len() + usize::from(i < need % members.len());
            if share == 0 {
                pools.push(Vec::new());
                continue;
            }
            let s = derive_seed(seed, &[family.index() as u64, u64::from(group), i as u64]);
            let demos = demonstrations(t, triggers, s);
            let batch = source.paraphrase(t, &demos, share + share / 2 + 2, s)?;
            pools.push(batch.accepted);
        }
        out.extend(members.iter().map(|t| (*t).clone()));
        let mut generated = 0;
        let mut cursors = vec![0usize; pools.len()];
        while generated < need {
            let mut progressed = false;
            for (p, pool) in pools.iter().enumerate() {
                if generated == need {
                    break;
                }
                while cursors[p] < pool.len() {
                    let text = &pool[cursors[p]];
                    cursors[p] += 1;
                    if seen.insert(normalize(text)) {
                        out.push(PromptTemplate {
                            id: format!("{family}/{group}/g{generated:03}"),
                            family,
                            group,
                            text: text.clone(),
                            origin: Origin::Generated,
                            split: None,
                        });
                        generated += 1;
                        progressed = true;
                        break;
                    }
                }
            }
            if !progressed {
                return Err(DataError::Insufficient {
                    wanted: per_group,
                    available: members.len() + generated,
                }
                .into());
            }
        }
    }
    Ok(out)
}
