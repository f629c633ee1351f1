use crate::data::{
    build_vocab, make_examples, nl_input, Catalog, DataError, ExampleOptions, Family, Holdout, IdInput, PromptSplit,
    PromptTemplate, TrainingExample, Vocab, ITEM_MATCH_INSTRUCTION, NEXT_MATCH_INSTRUCTION,
};
use crate::model::{build_visible_matrix, MaskError, Token, VisibleMatrix};

/// An ID-side input with its visibility matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct IdView {
    pub tokens: Vec<Token>,
    pub mask: VisibleMatrix,
}

impl IdView {
    pub fn new(input: &IdInput) -> Result<Self, MaskError> {
        Ok(Self {
            tokens: input.tokens.clone(),
            mask: build_visible_matrix(&input.spans)?,
        })
    }
}

/// Encoder inputs for feature matching under one holdout view.
///
/// Item pairs match an item's ID with its description. Sequence pairs
/// match a user's history with the description of the item that follows
/// it: the last training interaction under [`Holdout::ExcludeLast`], the
/// held-out one under [`Holdout::OnlyLast`]. Each sub-task prefixes the
/// description with its own instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureViews {
    pub item_id: Vec<IdView>,
    /// Descriptions under the item-matching instruction.
    pub item_nl: Vec<Vec<Token>>,
    /// Descriptions under the next-item instruction.
    pub next_nl: Vec<Vec<Token>>,
    pub history: Vec<IdView>,
    pub next_items: Vec<u32>,
}

impl FeatureViews {
    pub fn new(catalog: &Catalog, vocab: &Vocab, holdout: Holdout, opts: &ExampleOptions) -> Result<Self, DataError> {
        let mask_err = |e: MaskError| DataError::Precondition(e.to_string());
        let mode = opts.id_mode;
        let mut item_id = Vec::with_capacity(catalog.n_items());
        let mut item_nl = Vec::with_capacity(catalog.n_items());
        let mut next_nl = Vec::with_capacity(catalog.n_items());
        for item in &catalog.items {
            item_id.push(IdView::new(&IdInput::item(vocab, item.id, mode)).map_err(mask_err)?);
            let nl = |instruction: &str| {
                nl_input(
                    vocab,
                    &format!("{instruction} {}", item.description),
                    mode,
                    opts.max_nl_len,
                )
            };
            item_nl.push(nl(ITEM_MATCH_INSTRUCTION));
            next_nl.push(nl(NEXT_MATCH_INSTRUCTION));
        }
        let mut history = Vec::with_capacity(catalog.n_users());
        let mut next_items = Vec::with_capacity(catalog.n_users());
        for (user, inter) in catalog.interactions.iter().enumerate() {
            let visible = match holdout {
                Holdout::ExcludeLast => &inter[..inter.len().saturating_sub(1)],
                Holdout::OnlyLast => &inter[..],
            };
            if visible.len() < 2 {
                return Err(DataError::Insufficient {
                    wanted: 2,
                    available: visible.len(),
                });
            }
            let (past, next) = visible.split_at(visible.len() - 1);
            let items: Vec<u32> = past.iter().map(|x| x.item).collect();
            history
                .push(IdView::new(&IdInput::user_items(vocab, user, &items, mode, opts.max_id_len)).map_err(mask_err)?);
            next_items.push(next[0].item);
        }
        Ok(Self {
            item_id,
            item_nl,
            next_nl,
            history,
            next_items,
        })
    }
}

/// Everything a training run draws batches from.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub catalog: Catalog,
    pub vocab: Vocab,
    pub opts: ExampleOptions,
    /// Seen-split templates per family, in registry order.
    pub templates: [Vec<PromptTemplate>; 5],
    /// Training-view examples per family.
    pub examples: [Vec<TrainingExample>; 5],
    pub features: FeatureViews,
}

impl TrainingSet {
    /// `registry` is the full registry; only seen templates are used, but
    /// every template contributes to the vocabulary.
    pub fn new(catalog: Catalog, registry: &[PromptTemplate], opts: ExampleOptions) -> Result<Self, DataError> {
        catalog.validate()?;
        let vocab = build_vocab(&catalog, registry);
        let opts = ExampleOptions {
            holdout: Holdout::ExcludeLast,
            ..opts
        };
        let seen: Vec<PromptTemplate> = registry
            .iter()
            .filter(|t| t.split == Some(PromptSplit::Seen))
            .cloned()
            .collect();
        let mut templates: [Vec<PromptTemplate>; 5] = Default::default();
        let mut examples: [Vec<TrainingExample>; 5] = Default::default();
        for f in Family::ALL {
            let pool: Vec<PromptTemplate> = seen.iter().filter(|t| t.family == f).cloned().collect();
            if pool.is_empty() {
                return Err(DataError::Precondition(format!(
                    "no seen {f} templates in the registry"
                )));
            }
            let set = make_examples(&catalog, f, &pool, &vocab, &opts)?;
            if set.examples.is_empty() {
                return Err(DataError::Precondition(format!("no {f} training examples")));
            }
            templates[f.index()] = pool;
            examples[f.index()] = set.examples;
        }
        let features = FeatureViews::new(&catalog, &vocab, Holdout::ExcludeLast, &opts)?;
        Ok(Self {
            catalog,
            vocab,
            opts,
            templates,
            examples,
            features,
        })
    }
}
