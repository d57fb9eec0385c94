//! Feature vocabulary, impression records, embedding lookup, and spatiotemporal
//! filtering of behavior sequences.
//!
//! Every sparse field owns a contiguous block of rows in one shared embedding
//! table. Field-local id 0 is the out-of-vocabulary row of that field. Behavior
//! events reuse the rows of the field they point into (the candidate-item field by
//! default), so a clicked item and a candidate item share one embedding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor};

pub const OOV: u32 = 0;
pub const HOURS: u32 = 24;
/// Context features in embedding order: time-period, hour, city, geohash cell.
pub const CONTEXT_SLOTS: usize = 4;
/// Per-event features pooled from behavior sequences: item id, category.
pub const EVENT_SLOTS: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub time_period: u32,
    pub hour: u32,
    pub city: u32,
    pub geohash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    /// Id in the behavior source field (item ids).
    pub item: u32,
    /// Id in the behavior source field (category ids).
    pub category: u32,
    pub time_period: u32,
    pub hour: u32,
    pub city: u32,
    pub geohash: String,
}

/// One labeled exposure. Ids in `user`, `item`, `combine` and `extra` are local to
/// their field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub request_id: u64,
    pub user: Vec<u32>,
    pub behaviors: Arc<[BehaviorEvent]>,
    pub item: Vec<u32>,
    pub context: Context,
    pub combine: Vec<u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Vec<u32>>,
    pub label: u8,
}

impl Impression {
    pub fn field_ids(&self, name: &str) -> Option<&[u32]> {
        match name {
            "user" => Some(&self.user),
            "item" => Some(&self.item),
            "combine" => Some(&self.combine),
            other => self.extra.get(other).map(Vec::as_slice),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub time_periods: u32,
    pub cities: u32,
    pub geohash_buckets: u32,
}

impl ContextSpec {
    /// Rows used by the context field, OOV row included.
    pub fn vocab_size(&self) -> usize {
        1 + (self.time_periods + HOURS + self.cities + self.geohash_buckets) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldDef {
    Sparse {
        name: String,
        vocab_size: usize,
        slots: usize,
    },
    /// Pooled behavior sequence; event ids live in the `source` field.
    Behavior { name: String, source: String },
}

impl FieldDef {
    pub fn name(&self) -> &str {
        match self {
            FieldDef::Sparse { name, .. } | FieldDef::Behavior { name, .. } => name,
        }
    }
}

/// Field layout shared by data encoding and the model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub embedding_dim: usize,
    /// Gated fields in order. The context field is implicit and always last.
    pub fields: Vec<FieldDef>,
    pub context: ContextSpec,
    pub max_behaviors: usize,
    pub geohash_prefix: usize,
}

/// Entry of the on-disk vocabulary file: a plain feature count for id fields, or the
/// structured ranges of the context field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VocabEntry {
    Count(usize),
    Context(ContextSpec),
}

/// Field name → feature count, as stored in `vocab.json`.
pub type VocabFile = BTreeMap<String, VocabEntry>;

impl Schema {
    /// Canonical five-field layout (user, behavior, item, combine + context), with
    /// any further id fields appended in name order.
    pub fn from_vocab(
        vocab: &VocabFile,
        slots: &BTreeMap<String, usize>,
        embedding_dim: usize,
        max_behaviors: usize,
        geohash_prefix: usize,
    ) -> Result<Self> {
        let count = |name: &str| match vocab.get(name) {
            Some(VocabEntry::Count(n)) => Ok(*n),
            _ => Err(Error::Config(format!("vocabulary has no count for field {name:?}"))),
        };
        let context = match vocab.get("context") {
            Some(VocabEntry::Context(c)) => c.clone(),
            _ => return Err(Error::Config("vocabulary has no context entry".into())),
        };
        let sparse = |name: &str| -> Result<FieldDef> {
            Ok(FieldDef::Sparse {
                name: name.to_string(),
                vocab_size: count(name)?,
                slots: *slots.get(name).unwrap_or(&1),
            })
        };
        let mut fields = vec![
            sparse("user")?,
            FieldDef::Behavior {
                name: "behavior".into(),
                source: "item".into(),
            },
            sparse("item")?,
            sparse("combine")?,
        ];
        for name in vocab.keys() {
            if !["user", "item", "combine", "context"].contains(&name.as_str()) {
                fields.push(sparse(name)?);
            }
        }
        let schema = Schema {
            embedding_dim,
            fields,
            context,
            max_behaviors,
            geohash_prefix,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.context.time_periods == 0 || self.context.cities == 0 || self.context.geohash_buckets == 0 {
            return Err(Error::Config("context ranges must be positive".into()));
        }
        let mut names: Vec<&str> = self.fields.iter().map(FieldDef::name).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.fields.len() || names.contains(&"context") {
            return Err(Error::Config("field names must be unique and not 'context'".into()));
        }
        for f in &self.fields {
            match f {
                FieldDef::Sparse {
                    name,
                    vocab_size,
                    slots,
                } => {
                    if *vocab_size < 2 || *slots == 0 {
                        return Err(Error::Config(format!(
                            "field {name}: needs vocab_size >= 2 and slots >= 1"
                        )));
                    }
                }
                FieldDef::Behavior { name, source } => {
                    let ok = self
                        .fields
                        .iter()
                        .any(|g| matches!(g, FieldDef::Sparse { name: n, .. } if n == source));
                    if !ok {
                        return Err(Error::Config(format!(
                            "behavior field {name} points at unknown field {source}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Width of one gated field embedding (`k_j · D`).
    pub fn field_width(&self, field: &FieldDef) -> usize {
        match field {
            FieldDef::Sparse { slots, .. } => slots * self.embedding_dim,
            FieldDef::Behavior { .. } => EVENT_SLOTS * self.embedding_dim,
        }
    }

    pub fn context_width(&self) -> usize {
        CONTEXT_SLOTS * self.embedding_dim
    }

    pub fn behavior_width(&self) -> usize {
        EVENT_SLOTS * self.embedding_dim
    }

    /// Width of the concatenated representation fed to the semantic layer.
    pub fn concat_width(&self) -> usize {
        self.fields.iter().map(|f| self.field_width(f)).sum::<usize>() + self.context_width()
    }

    pub fn time_period_names(&self) -> Vec<String> {
        time_period_names(self.context.time_periods)
    }
}

/// Default names for up to five meal periods; `tp{i}` beyond that.
pub fn time_period_names(count: u32) -> Vec<String> {
    const NAMES: [&str; 5] = ["breakfast", "lunch", "afternoon_tea", "dinner", "night"];
    (0..count as usize)
        .map(|i| {
            if count as usize <= NAMES.len() {
                NAMES[i].to_string()
            } else {
                format!("tp{i}")
            }
        })
        .collect()
}

/// Row offsets of every field inside the shared embedding table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    schema: Schema,
    offsets: BTreeMap<String, (usize, usize)>,
    context_offset: usize,
    total: usize,
}

impl Vocabulary {
    pub fn new(schema: Schema) -> Result<Self> {
        schema.validate()?;
        let mut offsets = BTreeMap::new();
        let mut next = 0;
        for f in &schema.fields {
            if let FieldDef::Sparse {
                name, vocab_size, ..
            } = f
            {
                offsets.insert(name.clone(), (next, *vocab_size));
                next += vocab_size;
            }
        }
        let context_offset = next;
        let total = next + schema.context.vocab_size();
        Ok(Vocabulary {
            schema,
            offsets,
            context_offset,
            total,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Total feature count `N`.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Global row of a field-local id; unknown ids fall back to the field's OOV row.
    pub fn global_id(&self, field: &str, local: u32) -> usize {
        let (offset, size) = self.offsets[field];
        if (local as usize) < size {
            offset + local as usize
        } else {
            log::debug!("field {field}: id {local} out of vocabulary");
            offset + OOV as usize
        }
    }

    /// Global rows of the four context features.
    pub fn context_ids(&self, ctx: &Context) -> [usize; CONTEXT_SLOTS] {
        let spec = &self.schema.context;
        let base = self.context_offset;
        let within = |v: u32, n: u32, start: u32| -> usize {
            if v < n {
                base + (1 + start + v) as usize
            } else {
                log::debug!("context value {v} out of range {n}");
                base
            }
        };
        let t = spec.time_periods;
        let c = spec.cities;
        let bucket = geohash_bucket(&ctx.geohash, self.schema.geohash_prefix, spec.geohash_buckets);
        [
            within(ctx.time_period, t, 0),
            within(ctx.hour, HOURS, t),
            within(ctx.city, c, t + HOURS),
            base + (1 + t + HOURS + c + bucket) as usize,
        ]
    }

    fn behavior_source<'a>(&self, field: &'a FieldDef) -> Option<&'a str> {
        match field {
            FieldDef::Behavior { source, .. } => Some(source),
            _ => None,
        }
    }

    /// Field-local slot ids, padded with OOV or truncated to the declared slot count.
    fn slot_ids(&self, imp: &Impression, name: &str, slots: usize) -> Vec<usize> {
        let ids = imp.field_ids(name).unwrap_or(&[]);
        (0..slots)
            .map(|s| self.global_id(name, ids.get(s).copied().unwrap_or(OOV)))
            .collect()
    }

    pub fn validate_impression(&self, imp: &Impression) -> Result<()> {
        if imp.label > 1 {
            return Err(Error::Data(format!("label {} is not 0 or 1", imp.label)));
        }
        let spec = &self.schema.context;
        let ctx = &imp.context;
        if ctx.time_period >= spec.time_periods || ctx.hour >= HOURS || ctx.city >= spec.cities {
            return Err(Error::Data(format!(
                "context out of range: time_period {} hour {} city {}",
                ctx.time_period, ctx.hour, ctx.city
            )));
        }
        if imp.behaviors.len() > self.schema.max_behaviors {
            return Err(Error::Data(format!(
                "{} behavior events exceed the maximum of {}",
                imp.behaviors.len(),
                self.schema.max_behaviors
            )));
        }
        Ok(())
    }
}

/// FNV-1a, used for stable geohash bucketing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bucket in `[0, buckets)` of the geohash cell (its first `prefix` characters).
pub fn geohash_bucket(geohash: &str, prefix: usize, buckets: u32) -> u32 {
    let cell: String = geohash.chars().take(prefix).collect();
    (fnv1a(cell.as_bytes()) % u64::from(buckets)) as u32
}

/// Geohashes match when their first `prefix` characters agree; shorter strings must
/// match exactly.
pub fn geohash_match(a: &str, b: &str, prefix: usize) -> bool {
    let pa: Vec<char> = a.chars().take(prefix).collect();
    let pb: Vec<char> = b.chars().take(prefix).collect();
    pa == pb
}

/// Indices of events sharing the request's time-period and geohash cell. Falls back
/// to the whole sequence when nothing matches.
pub fn filtered_events(imp: &Impression, geohash_prefix: usize) -> Vec<usize> {
    let ctx = &imp.context;
    let kept: Vec<usize> = imp
        .behaviors
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.time_period == ctx.time_period && geohash_match(&e.geohash, &ctx.geohash, geohash_prefix)
        })
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        (0..imp.behaviors.len()).collect()
    } else {
        kept
    }
}

/// Dense embedding table `E`, stored with one row per feature (row `i` is `e_i`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn lookup(&self, global_id: usize) -> &[f64] {
        self.weights.row_slice(global_id)
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Concatenated embeddings of one field for one impression.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEmbedding {
    pub field: usize,
    pub values: Vec<f64>,
}

/// Field embeddings `x_j` in schema order plus the context embedding `x_c`.
pub fn embed_fields(
    imp: &Impression,
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> (Vec<FieldEmbedding>, Vec<f64>) {
    let schema = vocab.schema();
    let fields = schema
        .fields
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let values = match f {
                FieldDef::Sparse { name, slots, .. } => vocab
                    .slot_ids(imp, name, *slots)
                    .into_iter()
                    .flat_map(|id| table.lookup(id).to_vec())
                    .collect(),
                FieldDef::Behavior { source, .. } => {
                    let all: Vec<usize> = (0..imp.behaviors.len()).collect();
                    pool_events(imp, &all, vocab, source, table)
                }
            };
            FieldEmbedding { field: j, values }
        })
        .collect();
    let context = vocab
        .context_ids(&imp.context)
        .iter()
        .flat_map(|&id| table.lookup(id).to_vec())
        .collect();
    (fields, context)
}

/// Spatiotemporally filtered behavior embedding `h_ui` (mean of the kept events'
/// concatenated item and category embeddings).
pub fn filter_behaviors(imp: &Impression, vocab: &Vocabulary, table: &EmbeddingTable) -> Vec<f64> {
    let schema = vocab.schema();
    let source = schema
        .fields
        .iter()
        .find_map(|f| vocab.behavior_source(f))
        .unwrap_or("item");
    let kept = filtered_events(imp, schema.geohash_prefix);
    pool_events(imp, &kept, vocab, source, table)
}

fn pool_events(
    imp: &Impression,
    events: &[usize],
    vocab: &Vocabulary,
    source: &str,
    table: &EmbeddingTable,
) -> Vec<f64> {
    let d = table.dim();
    let mut out = vec![0.0; EVENT_SLOTS * d];
    if events.is_empty() {
        return out;
    }
    for &e in events {
        let ev = &imp.behaviors[e];
        for (slot, local) in [ev.item, ev.category].into_iter().enumerate() {
            let row = table.lookup(vocab.global_id(source, local));
            for (o, v) in out[slot * d..(slot + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    // Per-slot sums divided once, matching the graph's gather-mean.
    let k = events.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

/// Global ids of a batch laid out per slot, ready for graph gathers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub rows: usize,
    /// Per gated field: per slot (sparse) or per event slot (behavior), the ids of
    /// every row. Behavior fields use `lists`.
    pub fields: Vec<EncodedField>,
    /// Per event slot, per row: ids of the spatiotemporally filtered events.
    pub filtered: Vec<Vec<Vec<usize>>>,
    /// Per context slot, per row.
    pub context: Vec<Vec<usize>>,
    pub labels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncodedField {
    Slots(Vec<Vec<usize>>),
    Lists(Vec<Vec<Vec<usize>>>),
}

impl EncodedBatch {
    pub fn encode(vocab: &Vocabulary, batch: &[&Impression]) -> Self {
        let schema = vocab.schema();
        let rows = batch.len();
        let event_lists = |source: &str, pick: &dyn Fn(&Impression) -> Vec<usize>| {
            (0..EVENT_SLOTS)
                .map(|slot| {
                    batch
                        .iter()
                        .map(|imp| {
                            pick(imp)
                                .into_iter()
                                .map(|e| {
                                    let ev = &imp.behaviors[e];
                                    let local = if slot == 0 { ev.item } else { ev.category };
                                    vocab.global_id(source, local)
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect::<Vec<Vec<Vec<usize>>>>()
        };
        let mut source_name = "item".to_string();
        let fields = schema
            .fields
            .iter()
            .map(|f| match f {
                FieldDef::Sparse { name, slots, .. } => {
                    let per_row: Vec<Vec<usize>> =
                        batch.iter().map(|imp| vocab.slot_ids(imp, name, *slots)).collect();
                    EncodedField::Slots(
                        (0..*slots)
                            .map(|s| per_row.iter().map(|r| r[s]).collect())
                            .collect(),
                    )
                }
                FieldDef::Behavior { source, .. } => {
                    source_name = source.clone();
                    EncodedField::Lists(event_lists(source, &|imp| (0..imp.behaviors.len()).collect()))
                }
            })
            .collect();
        let prefix = schema.geohash_prefix;
        let filtered = event_lists(&source_name, &|imp| filtered_events(imp, prefix));
        let ctx_rows: Vec<[usize; CONTEXT_SLOTS]> =
            batch.iter().map(|imp| vocab.context_ids(&imp.context)).collect();
        let context = (0..CONTEXT_SLOTS)
            .map(|s| ctx_rows.iter().map(|r| r[s]).collect())
            .collect();
        EncodedBatch {
            rows,
            fields,
            filtered,
            context,
            labels: batch.iter().map(|imp| f64::from(imp.label)).collect(),
        }
    }
}

/// Graph nodes produced by the embedding stage.
#[derive(Clone, Debug)]
pub struct EmbeddedBatch {
    /// `x_j` per gated field, each `[rows × k_j·D]`.
    pub fields: Vec<NodeId>,
    /// `x_c`, `[rows × 4D]`.
    pub context: NodeId,
    /// `h_ui`, `[rows × 2D]`.
    pub filtered_behavior: NodeId,
}

/// Records the embedding lookups of a batch on `graph`.
pub fn embed_batch(graph: &mut Graph, table: NodeId, batch: &EncodedBatch) -> Result<EmbeddedBatch> {
    let mut fields = Vec::with_capacity(batch.fields.len());
    for f in &batch.fields {
        let parts = match f {
            EncodedField::Slots(slots) => slots
                .iter()
                .map(|ids| graph.gather(table, ids.clone()))
                .collect::<Result<Vec<_>>>()?,
            EncodedField::Lists(lists) => lists
                .iter()
                .map(|l| graph.gather_mean(table, l.clone()))
                .collect::<Result<Vec<_>>>()?,
        };
        fields.push(graph.concat(&parts, 1)?);
    }
    let ctx_parts = batch
        .context
        .iter()
        .map(|ids| graph.gather(table, ids.clone()))
        .collect::<Result<Vec<_>>>()?;
    let context = graph.concat(&ctx_parts, 1)?;
    let filt_parts = batch
        .filtered
        .iter()
        .map(|l| graph.gather_mean(table, l.clone()))
        .collect::<Result<Vec<_>>>()?;
    let filtered_behavior = graph.concat(&filt_parts, 1)?;
    Ok(EmbeddedBatch {
        fields,
        context,
        filtered_behavior,
    })
}

/// Reads a JSONL dataset. Parse failures are reported with their 1-based line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Impression>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let imp: Impression = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if imp.label > 1 {
            return Err(Error::Data(format!(
                "{}:{}: label {} is not 0 or 1",
                path.display(),
                i + 1,
                imp.label
            )));
        }
        out.push(imp);
    }
    Ok(out)
}

pub fn write_jsonl<'a>(path: &Path, impressions: impl IntoIterator<Item = &'a Impression>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for imp in impressions {
        serde_json::to_writer(&mut w, imp).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Validates every impression against the vocabulary, naming the offending row.
pub fn validate_dataset(vocab: &Vocabulary, data: &[Impression]) -> Result<()> {
    for (i, imp) in data.iter().enumerate() {
        vocab
            .validate_impression(imp)
            .map_err(|e| Error::Data(format!("record {}: {e}", i + 1)))?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<VocabFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Slot counts observed on the first impression, for fields without an explicit count.
pub fn observed_slots(sample: &Impression) -> BTreeMap<String, usize> {
    let mut slots = BTreeMap::from([
        ("user".to_string(), sample.user.len().max(1)),
        ("item".to_string(), sample.item.len().max(1)),
        ("combine".to_string(), sample.combine.len().max(1)),
    ]);
    for (k, v) in &sample.extra {
        slots.insert(k.clone(), v.len().max(1));
    }
    slots
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_schema(d: usize) -> Schema {
        Schema {
            embedding_dim: d,
            fields: vec![
                FieldDef::Sparse {
                    name: "user".into(),
                    vocab_size: 4,
                    slots: 1,
                },
                FieldDef::Behavior {
                    name: "behavior".into(),
                    source: "item".into(),
                },
                FieldDef::Sparse {
                    name: "item".into(),
                    vocab_size: 6,
                    slots: 2,
                },
                FieldDef::Sparse {
                    name: "combine".into(),
                    vocab_size: 3,
                    slots: 1,
                },
            ],
            context: ContextSpec {
                time_periods: 2,
                cities: 2,
                geohash_buckets: 3,
            },
            max_behaviors: 8,
            geohash_prefix: 4,
        }
    }

    fn event(item: u32, category: u32, tp: u32, geohash: &str) -> BehaviorEvent {
        BehaviorEvent {
            item,
            category,
            time_period: tp,
            hour: 8,
            city: 0,
            geohash: geohash.into(),
        }
    }

    fn imp(behaviors: Vec<BehaviorEvent>) -> Impression {
        Impression {
            request_id: 1,
            user: vec![2],
            behaviors: behaviors.into(),
            item: vec![1, 4],
            context: Context {
                time_period: 1,
                hour: 12,
                city: 1,
                geohash: "wx4gab".into(),
            },
            combine: vec![1],
            extra: BTreeMap::new(),
            label: 1,
        }
    }

    /// A handful of impressions over two periods with mixed labels.
    pub(crate) fn tiny_impressions() -> Vec<Impression> {
        let seq: Arc<[BehaviorEvent]> = vec![
            event(1, 4, 1, "wx4gzz"),
            event(2, 5, 0, "wx4gab"),
            event(3, 4, 1, "abcdef"),
        ]
        .into();
        (0..6u32)
            .map(|i| {
                let mut x = imp(vec![]);
                x.request_id = u64::from(i / 3);
                x.user = vec![i % 4];
                x.item = vec![1 + i % 3, 4 + i % 2];
                x.context.time_period = i % 2;
                x.context.hour = 7 + i;
                x.context.city = i % 2;
                x.combine = vec![i % 3];
                x.behaviors = if i % 3 == 0 { Arc::from(vec![]) } else { seq.clone() };
                x.label = (i % 2 == 0) as u8;
                x
            })
            .collect()
    }

    fn indexed_table(vocab: &Vocabulary, d: usize) -> EmbeddingTable {
        let n = vocab.len();
        let data = (0..n * d).map(|i| (i / d) as f64 + 0.01 * (i % d) as f64).collect();
        EmbeddingTable {
            weights: Tensor::matrix(n, d, data).unwrap(),
        }
    }

    #[test]
    fn field_layout_concatenates_in_slot_order() {
        let schema = Schema {
            embedding_dim: 3,
            fields: vec![FieldDef::Sparse {
                name: "item".into(),
                vocab_size: 3,
                slots: 2,
            }],
            ..tiny_schema(3)
        };
        let vocab = Vocabulary::new(Schema {
            fields: vec![
                schema.fields[0].clone(),
                FieldDef::Behavior {
                    name: "behavior".into(),
                    source: "item".into(),
                },
            ],
            ..schema
        })
        .unwrap();
        let mut w = Tensor::zeros(&[vocab.len(), 3]);
        w.data_mut()[3..6].copy_from_slice(&[1.0, 1.0, 1.0]);
        w.data_mut()[6..9].copy_from_slice(&[2.0, 2.0, 2.0]);
        let table = EmbeddingTable { weights: w };
        let mut i = imp(vec![]);
        i.item = vec![1, 2];
        let (fields, _) = embed_fields(&i, &vocab, &table);
        assert_eq!(fields[0].values, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn zero_table_gives_zero_fields_and_widths_follow_schema() {
        let vocab = Vocabulary::new(tiny_schema(3)).unwrap();
        let table = EmbeddingTable {
            weights: Tensor::zeros(&[vocab.len(), 3]),
        };
        let i = imp(vec![event(1, 4, 1, "wx4gzz")]);
        let (fields, ctx) = embed_fields(&i, &vocab, &table);
        for (f, def) in fields.iter().zip(&vocab.schema().fields) {
            assert!(f.values.iter().all(|v| *v == 0.0));
            assert_eq!(f.values.len(), vocab.schema().field_width(def));
        }
        assert_eq!(ctx.len(), 12);
    }

    #[test]
    fn unknown_ids_map_to_oov_without_changing_shape() {
        let vocab = Vocabulary::new(tiny_schema(2)).unwrap();
        let table = indexed_table(&vocab, 2);
        let mut i = imp(vec![]);
        i.user = vec![999];
        i.item = vec![1];
        let (fields, _) = embed_fields(&i, &vocab, &table);
        assert_eq!(fields[0].values, table.lookup(vocab.global_id("user", 0)).to_vec());
        assert_eq!(fields[2].values.len(), 4);
        assert_eq!(&fields[2].values[2..], table.lookup(vocab.global_id("item", 0)));
    }

    #[test]
    fn behavior_filter_cases() {
        let vocab = Vocabulary::new(tiny_schema(2)).unwrap();
        let table = indexed_table(&vocab, 2);
        let mean_of = |i: &Impression, idx: &[usize]| pool_events(i, idx, &vocab, "item", &table);

        let all_match = imp(vec![event(1, 4, 1, "wx4gaa"), event(2, 5, 1, "wx4gbb")]);
        assert_eq!(filter_behaviors(&all_match, &vocab, &table), mean_of(&all_match, &[0, 1]));

        let none_match = imp(vec![event(1, 4, 0, "wx4gaa"), event(2, 5, 1, "zzzzzz")]);
        assert_eq!(filter_behaviors(&none_match, &vocab, &table), mean_of(&none_match, &[0, 1]));

        let mixed = imp(vec![
            event(1, 4, 1, "wx4gaa"),
            event(2, 5, 0, "wx4gaa"),
            event(3, 4, 1, "wx5gaa"),
            event(4, 5, 1, "wx4g"),
        ]);
        // Brute force: same period and same 4-char prefix.
        let expect: Vec<usize> = mixed
            .behaviors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.time_period == 1 && e.geohash[..4] == mixed.context.geohash[..4])
            .map(|(k, _)| k)
            .collect();
        assert_eq!(expect, vec![0, 3]);
        assert_eq!(filter_behaviors(&mixed, &vocab, &table), mean_of(&mixed, &expect));

        let empty = imp(vec![]);
        assert_eq!(filter_behaviors(&empty, &vocab, &table), vec![0.0; 4]);
    }

    #[test]
    fn graph_embedding_matches_direct_lookup() {
        let vocab = Vocabulary::new(tiny_schema(3)).unwrap();
        let table = indexed_table(&vocab, 3);
        let a = imp(vec![event(1, 4, 1, "wx4gaa"), event(2, 5, 0, "wx4gaa")]);
        let mut b = imp(vec![]);
        b.user = vec![3];
        b.context.time_period = 0;
        let enc = EncodedBatch::encode(&vocab, &[&a, &b]);
        let mut g = Graph::new();
        let t = g.param("embedding", table.weights.clone());
        let emb = embed_batch(&mut g, t, &enc).unwrap();
        for (row, i) in [&a, &b].into_iter().enumerate() {
            let (fields, ctx) = embed_fields(i, &vocab, &table);
            for (f, node) in fields.iter().zip(&emb.fields) {
                assert_eq!(g.value(*node).row_slice(row), f.values.as_slice());
            }
            assert_eq!(g.value(emb.context).row_slice(row), ctx.as_slice());
            assert_eq!(
                g.value(emb.filtered_behavior).row_slice(row),
                filter_behaviors(i, &vocab, &table).as_slice()
            );
        }
    }

    #[test]
    fn jsonl_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = serde_json::to_string(&imp(vec![])).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"oops\": 1}}\n")).unwrap();
        let err = read_jsonl(&path).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains(":2:")), "{err}");

        write_jsonl(&path, &[imp(vec![event(1, 2, 0, "abcd")])]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![imp(vec![event(1, 2, 0, "abcd")])]);
    }

    #[test]
    fn validation_rejects_bad_records() {
        let vocab = Vocabulary::new(tiny_schema(2)).unwrap();
        let mut i = imp(vec![]);
        i.label = 2;
        assert!(vocab.validate_impression(&i).is_err());
        let mut i = imp(vec![]);
        i.context.hour = 24;
        assert!(vocab.validate_impression(&i).is_err());
        let i = imp(vec![event(1, 1, 0, "a"); 9]);
        assert!(vocab.validate_impression(&i).is_err());
    }
}
