use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Query used to obtain a class description from a general-purpose chat model.
/// Descriptions are ingested from static files; this text documents how they
/// were produced and is never sent anywhere by this crate.
pub const DESCRIPTION_QUERY_TEMPLATE: &str = "Please provide a detailed description of the visual \
characteristics that uniquely identify the <class name> object class, distinguishing it from other \
similar object categories. Focus solely on the distinguishing visual features in a comprehensive paragraph.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRecord {
    pub class_id: u32,
    pub class_name: String,
    pub description: String,
}

/// Parses a JSON array of `{class_id, class_name, description}` objects.
pub fn parse_class_descriptions(text: &str) -> Result<BTreeMap<u32, ClassRecord>> {
    let records: Vec<ClassRecord> =
        serde_json::from_str(text).map_err(|e| Error::parse("class descriptions", e))?;
    if records.is_empty() {
        return Err(Error::parse("class descriptions", "no entries"));
    }
    let mut out = BTreeMap::new();
    for r in records {
        if r.description.trim().is_empty() {
            return Err(Error::EmptyDescription(r.class_id));
        }
        let id = r.class_id;
        if out.insert(id, r).is_some() {
            return Err(Error::DuplicateClass(id));
        }
    }
    Ok(out)
}

pub fn load_class_descriptions(path: &Path) -> Result<BTreeMap<u32, ClassRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_class_descriptions(&text)
}

pub fn write_class_descriptions(path: &Path, records: &BTreeMap<u32, ClassRecord>) -> Result<()> {
    let list: Vec<&ClassRecord> = records.values().collect();
    let text = serde_json::to_string_pretty(&list).expect("records serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPOON: &str = "A spoon is a utensil characterized by its distinctive visual features that set it apart from other similar objects. The spoon typically has a shallow, oval or round bowl at one end, designed to hold and scoop liquids or semi-solids.";

    #[test]
    fn spoon_entry_parses() {
        let text = serde_json::json!([{ "class_id": 44, "class_name": "spoon", "description": SPOON }]).to_string();
        let map = parse_class_descriptions(&text).unwrap();
        assert!(map[&44].description.contains("shallow, oval or round bowl"));
        assert_eq!(map[&44].class_name, "spoon");
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(matches!(parse_class_descriptions("[]"), Err(Error::Parse { .. })));
        assert!(matches!(parse_class_descriptions(""), Err(Error::Parse { .. })));
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let text = r#"[{"class_id":7,"class_name":"a","description":"x"},{"class_id":7,"class_name":"b","description":"y"}]"#;
        assert!(matches!(parse_class_descriptions(text), Err(Error::DuplicateClass(7))));
    }

    #[test]
    fn blank_description_is_an_error() {
        let text = r#"[{"class_id":3,"class_name":"a","description":"  "}]"#;
        assert!(matches!(parse_class_descriptions(text), Err(Error::EmptyDescription(3))));
    }
}
