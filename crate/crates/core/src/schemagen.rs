//! Schema-driven generation of client interface files and mapping
//! descriptors, plus the descriptor set the server validates run sets with.
//!
//! Outputs are a pure function of the schema document bytes: the banner
//! carries the SHA-256 of those bytes, and nothing else (time, host, path)
//! leaks into them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ColumnSpec, ColumnType, RowSet, Value};

pub const IFC_SUFFIX: &str = ".ifc";
pub const MAPPING_SUFFIX: &str = ".mapping.json";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema is not valid JSON: {0}")]
    Json(String),
    #[error("schema declares no tables")]
    NoTables,
    #[error("duplicate table {0:?}")]
    DuplicateTable(String),
    #[error("tables {0:?} and {1:?} map to the same object type {2}")]
    DuplicateObjectType(String, String, String),
    #[error("invalid table name {0:?}: expected [A-Za-z][A-Za-z0-9_]*")]
    InvalidTableName(String),
    #[error("table {table:?}: invalid column name {column:?}: expected [A-Za-z_][A-Za-z0-9_]*")]
    InvalidColumnName { table: String, column: String },
    #[error("table {table:?}: duplicate column {column:?}")]
    DuplicateColumn { table: String, column: String },
    #[error("table {table:?}: column {column:?} has unknown type {ctype:?} (expected int, float or string)")]
    UnknownType {
        table: String,
        column: String,
        ctype: String,
    },
    #[error("table {table:?}: order_by {order_by:?} is not a column")]
    MissingOrderBy { table: String, order_by: String },
    #[error("table {0:?} has no columns")]
    EmptyColumns(String),
    #[error("table {table:?}: run set columns {found} do not match descriptor {expected}")]
    ColumnMismatch {
        table: String,
        expected: String,
        found: String,
    },
    #[error("invalid descriptor {path}: {reason}")]
    Descriptor { path: String, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    pub order_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaDoc {
    pub tables: Vec<TableSchema>,
    /// Lowercase hex SHA-256 of the source document.
    pub sha256: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    tables: Vec<RawTable>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    name: String,
    columns: Vec<RawColumn>,
    order_by: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawColumn {
    name: String,
    #[serde(rename = "type")]
    ctype: String,
}

fn is_table_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_column_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn schema_type(s: &str) -> Option<ColumnType> {
    match s {
        "int" => Some(ColumnType::Int),
        "float" => Some(ColumnType::Float),
        "string" => Some(ColumnType::String),
        _ => None,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// `smt_ped` and `SMT_PED` both become `SmtPed`.
pub fn object_type_name(table: &str) -> String {
    let mut out = String::with_capacity(table.len());
    for part in table.split('_').filter(|p| !p.is_empty()) {
        let mut chars = part.chars();
        if let Some(first) = chars.next() {
            out.push(first.to_ascii_uppercase());
            out.extend(chars.map(|c| c.to_ascii_lowercase()));
        }
    }
    out
}

pub fn parse_schema(document: &str) -> Result<SchemaDoc, SchemaError> {
    let raw: RawDoc =
        serde_json::from_str(document).map_err(|e| SchemaError::Json(e.to_string()))?;
    if raw.tables.is_empty() {
        return Err(SchemaError::NoTables);
    }
    let mut tables = Vec::with_capacity(raw.tables.len());
    let mut names = HashSet::new();
    let mut types: BTreeMap<String, String> = BTreeMap::new();
    for t in raw.tables {
        if !is_table_name(&t.name) {
            return Err(SchemaError::InvalidTableName(t.name));
        }
        if !names.insert(t.name.clone()) {
            return Err(SchemaError::DuplicateTable(t.name));
        }
        let ty = object_type_name(&t.name);
        if let Some(other) = types.insert(ty.clone(), t.name.clone()) {
            return Err(SchemaError::DuplicateObjectType(other, t.name, ty));
        }
        if t.columns.is_empty() {
            return Err(SchemaError::EmptyColumns(t.name));
        }
        let mut seen = HashSet::new();
        let mut columns = Vec::with_capacity(t.columns.len());
        for c in t.columns {
            if !is_column_name(&c.name) {
                return Err(SchemaError::InvalidColumnName {
                    table: t.name,
                    column: c.name,
                });
            }
            if !seen.insert(c.name.clone()) {
                return Err(SchemaError::DuplicateColumn {
                    table: t.name,
                    column: c.name,
                });
            }
            let Some(ctype) = schema_type(&c.ctype) else {
                return Err(SchemaError::UnknownType {
                    table: t.name,
                    column: c.name,
                    ctype: c.ctype,
                });
            };
            columns.push(ColumnSpec::new(c.name, ctype));
        }
        if !seen.contains(&t.order_by) {
            return Err(SchemaError::MissingOrderBy {
                table: t.name,
                order_by: t.order_by,
            });
        }
        tables.push(TableSchema {
            name: t.name,
            columns,
            order_by: t.order_by,
        });
    }
    Ok(SchemaDoc {
        tables,
        sha256: sha256_hex(document.as_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingDescriptor {
    pub table: String,
    pub object_type: String,
    pub fields: Vec<ColumnSpec>,
    pub key: Vec<String>,
    pub order_by: String,
    pub schema_sha256: String,
}

impl MappingDescriptor {
    pub fn from_table(table: &TableSchema, schema_sha256: &str) -> Self {
        Self {
            table: table.name.clone(),
            object_type: object_type_name(&table.name),
            fields: table.columns.clone(),
            key: vec!["run".into(), "variant".into()],
            order_by: table.order_by.clone(),
            schema_sha256: schema_sha256.to_string(),
        }
    }

    fn order_index(&self) -> Option<usize> {
        self.fields.iter().position(|f| f.name == self.order_by)
    }

    /// Checks the run set's columns against the declared fields.
    pub fn check(&self, rows: &RowSet) -> Result<(), SchemaError> {
        if rows.columns != self.fields {
            let show = |cols: &[ColumnSpec]| {
                let parts: Vec<_> = cols.iter().map(|c| format!("{}:{}", c.name, c.ctype)).collect();
                format!("({})", parts.join(", "))
            };
            return Err(SchemaError::ColumnMismatch {
                table: self.table.clone(),
                expected: show(&self.fields),
                found: show(&rows.columns),
            });
        }
        Ok(())
    }

    /// Validates `rows` and sorts them by the ordering column (stable,
    /// ascending; floats by IEEE total order).
    pub fn apply(&self, rows: &mut RowSet) -> Result<(), SchemaError> {
        self.check(rows)?;
        if let Some(i) = self.order_index() {
            let sorted = rows.rows.windows(2).all(|w| cmp_values(&w[0][i], &w[1][i]).is_le());
            if !sorted {
                rows.rows.sort_by(|a, b| cmp_values(&a[i], &b[i]));
            }
        }
        Ok(())
    }
}

fn cmp_values(a: &Value, b: &Value) -> Ordering {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) => x.cmp(y),
        (Value::Float(x), Value::Float(y)) => x.total_cmp(y),
        (Value::Str(x), Value::Str(y)) => x.cmp(y),
        _ => Ordering::Equal,
    }
}

/// The interface description for one table.
pub fn generate_client_interface(table: &TableSchema, schema_sha256: &str) -> String {
    let ty = object_type_name(&table.name);
    let width = table.columns.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(out, "// Generated by dan schemagen. Do not edit.").unwrap();
    writeln!(out, "// schema-sha256: {schema_sha256}").unwrap();
    writeln!(out, "// table: {}", table.name).unwrap();
    writeln!(out).unwrap();
    writeln!(out, "object {ty} {{").unwrap();
    for c in &table.columns {
        writeln!(out, "    {:width$} : {};", c.name, c.ctype).unwrap();
    }
    writeln!(out, "}}").unwrap();
    writeln!(out).unwrap();
    writeln!(out, "key (run: U64, variant: STRING);").unwrap();
    writeln!(out, "// rows ordered by {} ascending", table.order_by).unwrap();
    writeln!(out, "get_{}(run, variant) -> {ty};", table.name).unwrap();
    out
}

/// A generated file: name relative to the output directory, and contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedFile {
    pub name: String,
    pub contents: String,
}

/// Every output for `doc`, in schema table order: `<table>.ifc` then
/// `<table>.mapping.json` per table.
pub fn generate(doc: &SchemaDoc) -> Vec<GeneratedFile> {
    let mut files = Vec::with_capacity(doc.tables.len() * 2);
    for t in &doc.tables {
        files.push(GeneratedFile {
            name: format!("{}{IFC_SUFFIX}", t.name),
            contents: generate_client_interface(t, &doc.sha256),
        });
        let desc = MappingDescriptor::from_table(t, &doc.sha256);
        let mut json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
        json.push('\n');
        files.push(GeneratedFile {
            name: format!("{}{MAPPING_SUFFIX}", t.name),
            contents: json,
        });
    }
    files
}

/// Reads `schema_path`, generates, and writes into `out_dir`.
pub fn run_schemagen(schema_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, SchemaError> {
    let io = |p: &Path, e: std::io::Error| SchemaError::Io(format!("{}: {e}", p.display()));
    let text = fs::read_to_string(schema_path).map_err(|e| io(schema_path, e))?;
    let doc = parse_schema(&text)?;
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let mut written = Vec::new();
    for f in generate(&doc) {
        let path = out_dir.join(&f.name);
        fs::write(&path, f.contents).map_err(|e| io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Descriptors loaded at server startup, keyed by table.
#[derive(Debug, Clone, Default)]
pub struct DescriptorSet {
    by_table: BTreeMap<String, MappingDescriptor>,
}

impl DescriptorSet {
    pub fn load_dir(dir: &Path) -> Result<Self, SchemaError> {
        let io = |e: std::io::Error| SchemaError::Io(format!("{}: {e}", dir.display()));
        let mut names = Vec::new();
        for entry in fs::read_dir(dir).map_err(io)? {
            let name = entry.map_err(io)?.file_name().to_string_lossy().into_owned();
            if name.ends_with(MAPPING_SUFFIX) {
                names.push(name);
            }
        }
        names.sort();
        let mut set = Self::default();
        for name in names {
            let path = dir.join(&name);
            let bad = |reason: String| SchemaError::Descriptor {
                path: path.display().to_string(),
                reason,
            };
            let raw = fs::read(&path).map_err(|e| bad(e.to_string()))?;
            let desc: MappingDescriptor =
                serde_json::from_slice(&raw).map_err(|e| bad(e.to_string()))?;
            if desc.order_index().is_none() {
                return Err(bad(format!("order_by {:?} is not a field", desc.order_by)));
            }
            if set.by_table.contains_key(&desc.table) {
                return Err(bad(format!("second descriptor for table {:?}", desc.table)));
            }
            set.by_table.insert(desc.table.clone(), desc);
        }
        Ok(set)
    }

    pub fn insert(&mut self, desc: MappingDescriptor) {
        self.by_table.insert(desc.table.clone(), desc);
    }

    pub fn get(&self, table: &str) -> Option<&MappingDescriptor> {
        self.by_table.get(table)
    }

    pub fn len(&self) -> usize {
        self.by_table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_table.is_empty()
    }
}
