use std::fs;
use std::time::Duration;

use dan_core::backend::{gen_dataset, write_run_set};
use dan_core::config::ServerConfig;
use dan_core::model::{decode_object, encode_object, CalibKey, ColumnSpec, ColumnType, RowSet, Value};
use dan_core::schemagen::run_schemagen;
use dan_core::server::Server;
use dan_core::wire::{Client, ClientError, ErrorCode};

const SCHEMA: &str = r#"{"tables":[
  {"name":"smt_ped","columns":[{"name":"channel_id","type":"int"},{"name":"pedestal","type":"float"},{"name":"gain","type":"float"}],"order_by":"channel_id"},
  {"name":"beam_pos","columns":[{"name":"x","type":"float"},{"name":"label","type":"string"}],"order_by":"x"}
]}"#;

#[test]
fn generated_descriptors_gate_and_order_responses() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = dir.path().join("gen");
    fs::create_dir_all(&data).unwrap();
    fs::write(dir.path().join("schema.json"), SCHEMA).unwrap();
    let written = run_schemagen(&dir.path().join("schema.json"), &gen).unwrap();
    assert_eq!(written.len(), 4);

    let good = CalibKey::new("smt_ped", 1, "v").unwrap();
    gen_dataset(&data, &good, 100, 3).unwrap();

    // Matching columns stored out of order come back sorted.
    let beam = CalibKey::new("beam_pos", 2, "v").unwrap();
    let rows = RowSet {
        columns: vec![ColumnSpec::new("x", ColumnType::Float), ColumnSpec::new("label", ColumnType::String)],
        rows: vec![
            vec![Value::Float(2.5), Value::Str("b".into())],
            vec![Value::Float(-1.0), Value::Str("a".into())],
        ],
    };
    write_run_set(&data, &beam, &encode_object(&beam, &rows).unwrap()).unwrap();

    // Drifted columns are refused.
    let drift = CalibKey::new("beam_pos", 3, "v").unwrap();
    let wrong = RowSet {
        columns: vec![ColumnSpec::new("x", ColumnType::Int)],
        rows: vec![vec![Value::Int(1)]],
    };
    write_run_set(&data, &drift, &encode_object(&drift, &wrong).unwrap()).unwrap();

    let mut config = ServerConfig::direct("127.0.0.1:0", &data);
    config.descriptors_dir = Some(gen);
    let server = Server::start(config).unwrap();
    let mut c = Client::connect(&server.local_addr().to_string(), Duration::from_secs(5)).unwrap();

    assert!(c.get(&good).is_ok());
    let (_, sorted) = decode_object(&c.get(&beam).unwrap().payload).unwrap();
    assert_eq!(sorted.rows[0][0], Value::Float(-1.0));
    match c.get(&drift) {
        Err(ClientError::Remote { code, .. }) => assert_eq!(code, ErrorCode::Internal),
        other => panic!("expected INTERNAL, got {other:?}"),
    }
}
