//! Shared generators for protocol tests.
#![allow(dead_code)]

use offload_core::protocol::{
    MatrixInfo, Message, ParamMap, ParamValue, RowBatch, RowRange, TaskRequest, WorkerEndpoint,
};
use proptest::collection::vec;
use proptest::prelude::*;

/// Any f64 bit pattern, NaN payloads and signed zeros included.
pub fn any_bits() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<u64>().prop_map(f64::from_bits),
        Just(f64::NAN),
        Just(-0.0),
        Just(f64::INFINITY),
        Just(f64::NEG_INFINITY),
        Just(f64::MIN_POSITIVE / 2.0),
    ]
}

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9_ .:/é漢-]{0,24}"
}

fn param_value() -> impl Strategy<Value = ParamValue> {
    prop_oneof![
        any_bits().prop_map(ParamValue::F64),
        any::<i64>().prop_map(ParamValue::I64),
        text().prop_map(ParamValue::Str),
        any::<bool>().prop_map(ParamValue::Bool),
        any::<u64>().prop_map(ParamValue::Matrix),
    ]
}

pub fn params() -> impl Strategy<Value = ParamMap> {
    vec((text(), param_value()), 0..6).prop_map(|kv| {
        let mut m = ParamMap::new();
        for (k, v) in kv {
            m.insert(k, v);
        }
        m
    })
}

fn matrix_info() -> impl Strategy<Value = MatrixInfo> {
    (
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        vec((any::<u16>(), any::<u64>(), any::<u64>()), 0..5),
    )
        .prop_map(|(matrix_id, rows, cols, r)| MatrixInfo {
            matrix_id,
            rows,
            cols,
            ranges: r
                .into_iter()
                .map(|(worker_id, a, b)| RowRange {
                    worker_id,
                    row_start: a.min(b),
                    row_end: a.max(b),
                })
                .collect(),
        })
}

fn batch() -> impl Strategy<Value = RowBatch> {
    (any::<u64>(), 0usize..6, 1usize..6).prop_flat_map(|(id, rows, cols)| {
        (vec(any::<u64>(), rows), vec(any_bits(), rows * cols)).prop_map(move |(indices, values)| RowBatch {
            matrix_id: id,
            indices,
            values,
        })
    })
}

pub fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (any::<u16>(), any::<u16>()).prop_map(|(protocol_version, requested_workers)| Message::Handshake {
            protocol_version,
            requested_workers
        }),
        (any::<u32>(), vec((any::<u16>(), text()), 0..5)).prop_map(|(session_id, w)| Message::HandshakeAck {
            session_id,
            workers: w
                .into_iter()
                .map(|(worker_id, addr)| WorkerEndpoint { worker_id, addr })
                .collect(),
        }),
        (text(), text()).prop_map(|(name, path)| Message::RegisterLibrary { name, path }),
        any::<u16>().prop_map(|lib_id| Message::LibraryAck { lib_id }),
        (any::<u64>(), any::<u64>()).prop_map(|(rows, cols)| Message::CreateMatrix { rows, cols }),
        matrix_info().prop_map(Message::MatrixInfo),
        batch().prop_map(Message::SendRows),
        (any::<u64>(), any::<u32>()).prop_map(|(matrix_id, rows_received)| Message::RowsAck {
            matrix_id,
            rows_received
        }),
        any::<u64>().prop_map(|matrix_id| Message::SendComplete { matrix_id }),
        any::<u64>().prop_map(|matrix_id| Message::MatrixReady { matrix_id }),
        (any::<u16>(), text(), vec(any::<u64>(), 0..4), params()).prop_map(|(lib_id, routine, inputs, params)| {
            Message::RunTask(TaskRequest {
                lib_id,
                routine,
                inputs,
                params,
            })
        }),
        (any::<u8>(), vec(matrix_info(), 0..3), params()).prop_map(|(status, outputs, scalars)| Message::TaskResult {
            status,
            outputs,
            scalars
        }),
        (any::<u64>(), any::<u64>(), any::<u32>()).prop_map(|(matrix_id, row_start, row_count)| Message::FetchRows {
            matrix_id,
            row_start,
            row_count
        }),
        batch().prop_map(Message::RowsData),
        any::<u64>().prop_map(|matrix_id| Message::ReleaseMatrix { matrix_id }),
        Just(Message::CloseSession),
        (any::<u16>(), text()).prop_map(|(code, message)| Message::Error { code, message }),
    ]
}
