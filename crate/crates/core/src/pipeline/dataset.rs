use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::encoder::{tokenize_with_offsets, SentenceInstance, Span};

pub const ADVERSE: &str = "adverse";
pub const NOT_ADVERSE: &str = "not-adverse";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSchema {
    #[default]
    PairwiseJson,
    AdeBinary,
}

impl std::str::FromStr for DatasetSchema {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise-json" => Ok(DatasetSchema::PairwiseJson),
            "ade-binary" => Ok(DatasetSchema::AdeBinary),
            other => Err(PipelineError::Config(format!("unknown dataset schema `{other}`"))),
        }
    }
}

/// Entity mention with character offsets `[start, end)` into the sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMention {
    pub text: String,
    pub cui: String,
    pub start: usize,
    pub end: usize,
}

/// One line of a dataset file. `relation` belongs to the pairwise schema,
/// `adverse` to the ADE schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub sentence: String,
    pub head: EntityMention,
    pub tail: EntityMention,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adverse: Option<bool>,
}

impl DatasetRecord {
    pub fn to_instance(&self, schema: DatasetSchema) -> std::result::Result<SentenceInstance, String> {
        let label = self.label(schema)?;
        if label.trim().is_empty() {
            return Err("empty relation label".into());
        }
        self.with_label(label)
    }

    /// Like [`DatasetRecord::to_instance`], but a missing label leaves the
    /// gold relation empty.
    pub fn to_unlabeled_instance(&self, schema: DatasetSchema) -> std::result::Result<SentenceInstance, String> {
        let label = match (schema, &self.relation, self.adverse) {
            (DatasetSchema::PairwiseJson, None, _) | (DatasetSchema::AdeBinary, _, None) => String::new(),
            _ => self.label(schema)?,
        };
        self.with_label(label)
    }

    fn label(&self, schema: DatasetSchema) -> std::result::Result<String, String> {
        Ok(match schema {
            DatasetSchema::PairwiseJson => self
                .relation
                .clone()
                .ok_or("missing `relation` field")?,
            DatasetSchema::AdeBinary => match self.adverse.ok_or("missing `adverse` field")? {
                true => ADVERSE.to_string(),
                false => NOT_ADVERSE.to_string(),
            },
        })
    }

    fn with_label(&self, label: String) -> std::result::Result<SentenceInstance, String> {
        let offsets = tokenize_with_offsets(&self.sentence);
        let chars = self.sentence.chars().count();
        let span = |m: &EntityMention, role: &str| -> std::result::Result<Span, String> {
            if m.start >= m.end || m.end > chars {
                return Err(format!(
                    "{role} span {}..{} out of bounds for a sentence of {chars} characters",
                    m.start, m.end
                ));
            }
            let covered: Vec<usize> = offsets
                .iter()
                .enumerate()
                .filter(|(_, (_, s, e))| *s < m.end && *e > m.start)
                .map(|(i, _)| i)
                .collect();
            match (covered.first(), covered.last()) {
                (Some(&a), Some(&b)) => {
                    let mention: String = self.sentence.chars().skip(m.start).take(m.end - m.start).collect();
                    if mention != m.text {
                        log::warn!("{role} text `{}` differs from sentence span `{mention}`", m.text);
                    }
                    Ok(Span::new(a, b + 1))
                }
                _ => Err(format!("{role} span {}..{} covers no token", m.start, m.end)),
            }
        };
        let head = span(&self.head, "head")?;
        let tail = span(&self.tail, "tail")?;
        let tokens = offsets.into_iter().map(|(t, _, _)| t).collect();
        SentenceInstance::new(tokens, head, tail, &self.head.cui, &self.tail.cui, label)
            .map_err(|e| e.to_string())
    }
}

/// Parse line-delimited records. When `vocabulary` is given, labels outside
/// it are rejected.
pub fn load_dataset<R: Read>(
    source: R,
    schema: DatasetSchema,
    vocabulary: Option<&[String]>,
) -> Result<Vec<SentenceInstance>> {
    let known: Option<BTreeSet<&str>> = vocabulary.map(|v| v.iter().map(String::as_str).collect());
    let mut out = Vec::new();
    for_each_record(source, |line_no, record| {
        let err = |message: String| PipelineError::Record { line: line_no, message };
        let inst = record.to_instance(schema).map_err(err)?;
        if let Some(known) = &known {
            if !known.contains(inst.gold_relation.as_str()) {
                return Err(err(format!("unknown relation label `{}`", inst.gold_relation)));
            }
        }
        out.push(inst);
        Ok(())
    })?;
    Ok(out)
}

/// Records for prediction: labels are optional and never checked.
pub fn load_unlabeled<R: Read>(source: R, schema: DatasetSchema) -> Result<Vec<SentenceInstance>> {
    let mut out = Vec::new();
    for_each_record(source, |line_no, record| {
        let inst = record
            .to_unlabeled_instance(schema)
            .map_err(|message| PipelineError::Record { line: line_no, message })?;
        out.push(inst);
        Ok(())
    })?;
    Ok(out)
}

fn for_each_record<R: Read>(source: R, mut f: impl FnMut(usize, DatasetRecord) -> Result<()>) -> Result<()> {
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| PipelineError::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        f(line_no, record)?;
    }
    Ok(())
}

pub fn load_dataset_file(
    path: &Path,
    schema: DatasetSchema,
    vocabulary: Option<&[String]>,
) -> Result<Vec<SentenceInstance>> {
    let file = File::open(path).map_err(|e| PipelineError::from(e).in_file(path))?;
    load_dataset(file, schema, vocabulary).map_err(|e| e.in_file(path))
}
