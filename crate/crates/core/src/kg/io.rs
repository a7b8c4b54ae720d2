use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{validate, AttributeId, EntityId, Modality, MultiModalKG, RelationTypeId, Triple};
use crate::error::{Error, Result};
use crate::features::{load_feature_table, FeatureTable};

const ENTITIES: &str = "entities.txt";
const RELATIONS: &str = "relations.txt";
const TRIPLES: &str = "triples.tsv";
const ATTRIBUTES: &str = "attributes.tsv";
const TEXT_FEATURES: &str = "text_features.txt";
const IMAGE_FEATURES: &str = "image_features.txt";

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-blank lines with their 1-based numbers, split on tabs.
fn tab_records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').split('\t').collect()))
}

fn expect_fields<'a>(
    path: &Path,
    line: usize,
    fields: Vec<&'a str>,
    n: usize,
) -> Result<Vec<&'a str>> {
    if fields.len() != n || fields.iter().any(|f| f.is_empty()) {
        return Err(Error::parse(
            path,
            line,
            format!(
                "expected {n} non-empty tab-separated fields, found {}",
                fields.len()
            ),
        ));
    }
    Ok(fields)
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Interner {
    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

/// Import an mmkb-style dataset.
///
/// * relational triples: `head \t relation \t tail`
/// * attribute triples: `entity \t attribute-name \t feature-key`; the key
///   is looked up in the text table first, then the image table, and the
///   hit decides the modality. Every line becomes its own [`AttributeId`].
/// * feature tables: the canonical feature format, keyed by feature-key.
///
/// The entity set is the set of entities named by relational triples.
/// Attribute lines naming other entities, unresolved feature keys,
/// self-loops and duplicate triples are all reported together as a
/// validation error.
pub fn load_mmkb(
    rel_triples_path: &Path,
    attr_triples_path: &Path,
    text_feature_path: &Path,
    image_feature_path: &Path,
) -> Result<MultiModalKG> {
    let text_table: FeatureTable<String> = load_feature_table(text_feature_path, None)?;
    let image_table: FeatureTable<String> = load_feature_table(image_feature_path, None)?;

    let mut entities = Interner::default();
    let mut relations = Interner::default();
    let mut triples = Vec::new();
    let rel_text = read(rel_triples_path)?;
    for (line, fields) in tab_records(&rel_text) {
        let f = expect_fields(rel_triples_path, line, fields, 3)?;
        let head = EntityId::from(entities.intern(f[0]));
        let rel = RelationTypeId::from(relations.intern(f[1]));
        let tail = EntityId::from(entities.intern(f[2]));
        triples.push(Triple { head, rel, tail });
    }

    let mut problems = Vec::new();
    let mut text_attrs: BTreeMap<EntityId, Vec<AttributeId>> = BTreeMap::new();
    let mut image_attrs: BTreeMap<EntityId, Vec<AttributeId>> = BTreeMap::new();
    let mut text_features = FeatureTable::new(text_table.dim);
    let mut image_features = FeatureTable::new(image_table.dim);
    let attr_text = read(attr_triples_path)?;
    for (line, fields) in tab_records(&attr_text) {
        let f = expect_fields(attr_triples_path, line, fields, 3)?;
        let Some(&e) = entities.index.get(f[0]) else {
            problems.push(format!(
                "DanglingEntity: {}:{line}: entity {:?} does not occur in any relational triple",
                attr_triples_path.display(),
                f[0]
            ));
            continue;
        };
        let entity = EntityId::from(e);
        if let Some(v) = text_table.get(&f[2].to_string()) {
            let id = AttributeId::from(text_features.len());
            text_features.vectors.insert(id, v.to_vec());
            text_attrs.entry(entity).or_default().push(id);
        } else if let Some(v) = image_table.get(&f[2].to_string()) {
            let id = AttributeId::from(image_features.len());
            image_features.vectors.insert(id, v.to_vec());
            image_attrs.entry(entity).or_default().push(id);
        } else {
            problems.push(format!(
                "MissingFeature: {}:{line}: feature key {:?} (attribute {:?} of {:?}) is in neither feature table",
                attr_triples_path.display(),
                f[2],
                f[1],
                f[0]
            ));
        }
    }

    let kg = MultiModalKG {
        entities: entities.names,
        relation_types: relations.names,
        triples,
        text_attrs,
        image_attrs,
        text_features,
        image_features,
    };
    problems.extend(validate(&kg).violations.iter().map(ToString::to_string));
    if problems.is_empty() {
        Ok(kg)
    } else {
        Err(Error::Validation(problems))
    }
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write the id-stable canonical directory layout.
pub fn write_canonical(kg: &MultiModalKG, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(&dir.join(ENTITIES), kg.entities.iter().cloned())?;
    write_lines(&dir.join(RELATIONS), kg.relation_types.iter().cloned())?;
    write_lines(
        &dir.join(TRIPLES),
        kg.triples.iter().map(|t| {
            format!(
                "{}\t{}\t{}",
                kg.entities[t.head.index()],
                kg.relation_types[t.rel.index()],
                kg.entities[t.tail.index()]
            )
        }),
    )?;
    let mut attr_lines = Vec::new();
    for modality in Modality::ALL {
        for (e, attrs) in kg.attrs(modality) {
            for a in attrs {
                attr_lines.push(format!("{}\t{modality}\t{a}", kg.entities[e.index()]));
            }
        }
    }
    write_lines(&dir.join(ATTRIBUTES), attr_lines)?;
    write_dim_header(&dir.join(TEXT_FEATURES), &kg.text_features)?;
    write_dim_header(&dir.join(IMAGE_FEATURES), &kg.image_features)
}

// An empty table would otherwise lose its dimension.
fn write_dim_header(path: &Path, table: &FeatureTable<AttributeId>) -> Result<()> {
    table.write(path)?;
    let body = read(path)?;
    fs::write(path, format!("# dim {}\n{body}", table.dim)).map_err(|e| Error::io(path, e))
}

fn load_dim_header(path: &Path) -> Result<FeatureTable<AttributeId>> {
    let text = read(path)?;
    let dim = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# dim "))
        .and_then(|d| d.trim().parse().ok());
    crate::features::parse_feature_table(&text, path, dim)
}

/// Load a directory written by [`write_canonical`]; ids are reproduced exactly.
pub fn load_canonical(dir: &Path) -> Result<MultiModalKG> {
    let entities: Vec<String> = read(&dir.join(ENTITIES))?
        .lines()
        .map(str::to_string)
        .collect();
    let relation_types: Vec<String> = read(&dir.join(RELATIONS))?
        .lines()
        .map(str::to_string)
        .collect();
    let ent_index: HashMap<&str, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let rel_index: HashMap<&str, usize> = relation_types
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let lookup = |path: &Path, line: usize, map: &HashMap<&str, usize>, name: &str, kind: &str| {
        map.get(name)
            .copied()
            .ok_or_else(|| Error::parse(path, line, format!("unknown {kind} {name:?}")))
    };

    let triples_path = dir.join(TRIPLES);
    let mut triples = Vec::new();
    for (line, fields) in tab_records(&read(&triples_path)?) {
        let f = expect_fields(&triples_path, line, fields, 3)?;
        triples.push(Triple {
            head: EntityId::from(lookup(&triples_path, line, &ent_index, f[0], "entity")?),
            rel: RelationTypeId::from(lookup(&triples_path, line, &rel_index, f[1], "relation")?),
            tail: EntityId::from(lookup(&triples_path, line, &ent_index, f[2], "entity")?),
        });
    }

    let attrs_path = dir.join(ATTRIBUTES);
    let mut text_attrs: BTreeMap<EntityId, Vec<AttributeId>> = BTreeMap::new();
    let mut image_attrs: BTreeMap<EntityId, Vec<AttributeId>> = BTreeMap::new();
    for (line, fields) in tab_records(&read(&attrs_path)?) {
        let f = expect_fields(&attrs_path, line, fields, 3)?;
        let e = EntityId::from(lookup(&attrs_path, line, &ent_index, f[0], "entity")?);
        let modality: Modality = f[1]
            .parse()
            .map_err(|_| Error::parse(&attrs_path, line, "bad modality"))?;
        let a: AttributeId = f[2]
            .parse()
            .map_err(|_| Error::parse(&attrs_path, line, format!("bad attribute id {:?}", f[2])))?;
        match modality {
            Modality::Text => text_attrs.entry(e).or_default().push(a),
            Modality::Image => image_attrs.entry(e).or_default().push(a),
        }
    }

    let kg = MultiModalKG {
        entities,
        relation_types,
        triples,
        text_attrs,
        image_attrs,
        text_features: load_dim_header(&dir.join(TEXT_FEATURES))?,
        image_features: load_dim_header(&dir.join(IMAGE_FEATURES))?,
    };
    validate(&kg).into_result()?;
    Ok(kg)
}
