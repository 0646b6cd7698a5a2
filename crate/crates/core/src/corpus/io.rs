//! The `jsonl-v1` corpus format: one image-recipe pair per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use super::record::{CorpusSchema, CultureTag, ImageRecord, Pair, RecipeRecord, Sections};
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    JsonlV1,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl-v1" => Ok(CorpusFormat::JsonlV1),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    title: &'a str,
    culture: &'a str,
    keywords: &'a BTreeSet<String>,
    ingredients: &'a [String],
    actions: &'a BTreeMap<String, Vec<String>>,
    image_features: &'a [f64],
    sections: &'a Sections,
}

fn field<T: DeserializeOwned>(obj: &Map<String, Value>, name: &str, line: usize) -> Result<T, CorpusError> {
    let v = obj.get(name).ok_or_else(|| CorpusError::Parse {
        line,
        field: name.to_string(),
        message: "missing field".into(),
    })?;
    serde_json::from_value(v.clone()).map_err(|e| CorpusError::Parse {
        line,
        field: name.to_string(),
        message: e.to_string(),
    })
}

const FIELDS: [&str; 8] = [
    "id",
    "title",
    "culture",
    "keywords",
    "ingredients",
    "actions",
    "image_features",
    "sections",
];

/// Parses one line into a pair. The image record id is `<id>/image`.
pub fn parse_line(text: &str, line: usize) -> Result<Pair, CorpusError> {
    let value: Value = serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        line,
        field: "<line>".into(),
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Parse {
        line,
        field: "<line>".into(),
        message: "expected a JSON object".into(),
    })?;
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(CorpusError::Parse {
            line,
            field: extra.clone(),
            message: "unknown field".into(),
        });
    }
    let id: String = field(obj, "id", line)?;
    let features: Vec<f64> = field(obj, "image_features", line)?;
    if features.iter().any(|x| !x.is_finite()) {
        return Err(CorpusError::Parse {
            line,
            field: "image_features".into(),
            message: "non-finite feature".into(),
        });
    }
    let recipe = RecipeRecord {
        id: id.clone(),
        title: field(obj, "title", line)?,
        culture: CultureTag(field(obj, "culture", line)?),
        ingredients: field(obj, "ingredients", line)?,
        actions_per_ingredient: field(obj, "actions", line)?,
        title_keywords: field(obj, "keywords", line)?,
        sections: field(obj, "sections", line)?,
    };
    let image = ImageRecord {
        id: format!("{id}/image"),
        pair_id: id,
        features,
    };
    Ok(Pair { recipe, image })
}

pub fn load_corpus(path: &Path, format: CorpusFormat, schema: &CorpusSchema) -> Result<Vec<Pair>, CorpusError> {
    let file = File::open(path)?;
    read_corpus(BufReader::new(file), format, schema)
}

pub fn read_corpus(reader: impl BufRead, format: CorpusFormat, schema: &CorpusSchema) -> Result<Vec<Pair>, CorpusError> {
    let CorpusFormat::JsonlV1 = format;
    let mut pairs = Vec::new();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut feature_dim = None;
    for (i, text) in reader.lines().enumerate() {
        let text = text?;
        let line = i + 1;
        if text.trim().is_empty() {
            continue;
        }
        let pair = parse_line(&text, line)?;
        if let Some(&first) = first_seen.get(pair.id()) {
            return Err(CorpusError::DuplicateId {
                id: pair.id().to_string(),
                first_line: first,
                second_line: line,
            });
        }
        pair.recipe.validate(schema).map_err(|e| e.at_line(line))?;
        let dim = pair.image.features.len();
        match feature_dim {
            None => feature_dim = Some(dim),
            Some(d) if d != dim => {
                return Err(CorpusError::Parse {
                    line,
                    field: "image_features".into(),
                    message: format!("expected {d} features, found {dim}"),
                })
            }
            _ => {}
        }
        first_seen.insert(pair.id().to_string(), line);
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_corpus(mut w: impl Write, pairs: &[Pair]) -> Result<(), CorpusError> {
    for p in pairs {
        let r = &p.recipe;
        let out = LineOut {
            id: &r.id,
            title: &r.title,
            culture: r.culture.as_str(),
            keywords: &r.title_keywords,
            ingredients: &r.ingredients,
            actions: &r.actions_per_ingredient,
            image_features: &p.image.features,
            sections: &r.sections,
        };
        serde_json::to_writer(&mut w, &out).map_err(|e| CorpusError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::record::CultureSet;

    fn schema() -> CorpusSchema {
        CorpusSchema {
            cultures: CultureSet::new(["Thailand", "India"]),
            max_actions: 4,
        }
    }

    fn line(id: &str) -> String {
        format!(
            r#"{{"id":"{id}","title":"green curry","culture":"Thailand","keywords":["curry"],"ingredients":["chicken","basil"],"actions":{{"chicken":["slice","fry"]}},"image_features":[0.5,-1.0],"sections":{{"title_text":["green curry"],"ingredient_lines":["chicken","basil"],"instruction_lines":["slice chicken"]}}}}"#
        )
    }

    #[test]
    fn empty_input_gives_empty_corpus() {
        let pairs = read_corpus("".as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn single_line_round_trips() {
        let text = line("r1");
        let pairs = read_corpus(text.as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].image.pair_id, "r1");
        assert_eq!(pairs[0].recipe.actions_per_ingredient["chicken"], vec!["slice", "fry"]);
        let mut buf = Vec::new();
        write_corpus(&mut buf, &pairs).unwrap();
        let again = read_corpus(buf.as_slice(), CorpusFormat::JsonlV1, &schema()).unwrap();
        assert_eq!(again, pairs);
    }

    #[test]
    fn duplicate_id_cites_both_lines() {
        let ids = ["a", "b", "dup", "c", "d", "e", "dup"];
        let text: Vec<String> = ids.iter().map(|id| line(id)).collect();
        let err = read_corpus(text.join("\n").as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap_err();
        match err {
            CorpusError::DuplicateId {
                id,
                first_line,
                second_line,
            } => {
                assert_eq!(id, "dup");
                assert_eq!((first_line, second_line), (3, 7));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn parse_error_names_line_and_field() {
        let bad = line("x").replace(r#""title":"green curry""#, r#""title":7"#);
        let text = format!("{}\n{}", line("ok"), bad);
        let err = read_corpus(text.as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap_err();
        match err {
            CorpusError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "title");
            }
            other => panic!("unexpected error {other}"),
        }
        let missing = line("y").replace(r#""culture":"Thailand","#, "");
        let err = read_corpus(missing.as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { ref field, .. } if field == "culture"));
    }

    #[test]
    fn unknown_culture_rejected() {
        let text = line("z").replace("Thailand", "Peru");
        let err = read_corpus(text.as_bytes(), CorpusFormat::JsonlV1, &schema()).unwrap_err();
        assert!(err.to_string().contains("Peru"), "{err}");
    }

    #[test]
    fn unknown_format_rejected() {
        assert!("csv-v0".parse::<CorpusFormat>().is_err());
    }
}
