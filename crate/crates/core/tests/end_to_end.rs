use std::io::{BufWriter, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use offload_core::binfile;
use offload_core::client::{CgOptions, ClientConfig, ClientError, LocalMatrix, Session, SvdOptions};
use offload_core::protocol::{write_frame, ErrorCode, FrameReader, Message, RowBatch, PROTOCOL_VERSION};
use offload_core::server::{Server, ServerConfig, ServerHandle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn server(workers: usize) -> ServerHandle {
    Server::start(ServerConfig::local(workers)).unwrap()
}

fn connect(srv: &ServerHandle, workers: u16) -> Session {
    Session::connect(ClientConfig::new(srv.addr().to_string(), workers).timeout(Duration::from_secs(60))).unwrap()
}

fn wait_until(mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    false
}

fn code(e: ClientError) -> Option<ErrorCode> {
    e.code()
}

#[test]
fn handshake_allocates_workers() {
    let srv = server(4);
    let a = connect(&srv, 4);
    assert_eq!(a.id(), 1);
    assert_eq!(a.worker_endpoints().len(), 4);
    let b = connect(&srv, 2);
    assert_eq!(b.id(), 2);
    assert_eq!(b.worker_endpoints().len(), 2);
    let err = Session::connect(ClientConfig::new(srv.addr().to_string(), 8))
        .err()
        .unwrap();
    assert_eq!(code(err), Some(ErrorCode::InsufficientWorkers));
}

#[test]
fn version_mismatch_is_rejected() {
    let srv = server(1);
    let stream = TcpStream::connect(srv.addr()).unwrap();
    let mut w = BufWriter::new(stream.try_clone().unwrap());
    let mut r = FrameReader::new(stream);
    let hs = Message::Handshake {
        protocol_version: PROTOCOL_VERSION + 1,
        requested_workers: 1,
    };
    write_frame(&mut w, &hs, 0).unwrap();
    w.flush().unwrap();
    match r.read_frame().unwrap() {
        Some((_, Message::Error { code, .. })) => assert_eq!(code, ErrorCode::VersionMismatch as u16),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shuffled_upload_round_trips() {
    let srv = server(4);
    let s = connect(&srv, 4);
    let data = gaussian(10, 4, 1);
    let m = LocalMatrix::from_row_major(10, 4, data.clone()).unwrap().shuffled(9);
    let h = s.send_matrix(&m).unwrap();
    assert_eq!(h.id(), 1);
    let ranges: Vec<_> = h.info().ranges.iter().map(|r| (r.row_start, r.row_end)).collect();
    assert_eq!(ranges, [(0, 3), (3, 6), (6, 9), (9, 10)]);
    let back = s.fetch_row_major(&h).unwrap();
    assert_eq!(
        back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let h2 = s.send_matrix(&m).unwrap();
    assert_eq!(h2.id(), 2);
}

#[test]
fn special_floats_survive() {
    let srv = server(2);
    let s = Session::connect(ClientConfig::new(srv.addr().to_string(), 2).batch_rows(1)).unwrap();
    let data = vec![
        0.0,
        -0.0,
        f64::MIN_POSITIVE / 4.0,
        -f64::MAX,
        f64::INFINITY,
        f64::from_bits(0x7ff8_0000_0000_1234),
    ];
    let h = s
        .send_matrix(&LocalMatrix::from_row_major(3, 2, data.clone()).unwrap())
        .unwrap();
    let back = s.fetch_row_major(&h).unwrap();
    for (a, b) in back.iter().zip(&data) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn empty_matrix_fails_before_sending() {
    let srv = server(1);
    let s = connect(&srv, 1);
    assert!(matches!(
        s.send_matrix(&LocalMatrix::new(3, 0)),
        Err(ClientError::InvalidMatrix(_))
    ));
    assert!(matches!(
        s.send_matrix(&LocalMatrix::new(2, 2)),
        Err(ClientError::InvalidMatrix(_))
    ));
    assert_eq!(srv.live_matrices(), 0);
}

/// Speaks the raw protocol to leave one row out.
#[test]
fn missing_row_blocks_finalize() {
    let srv = server(2);
    let driver = TcpStream::connect(srv.addr()).unwrap();
    let mut dw = BufWriter::new(driver.try_clone().unwrap());
    let mut dr = FrameReader::new(driver);
    let mut call = |msg: Message, session: u32| {
        write_frame(&mut dw, &msg, session).unwrap();
        dw.flush().unwrap();
        dr.read_frame().unwrap().unwrap().1
    };
    let Message::HandshakeAck { session_id, workers } = call(
        Message::Handshake {
            protocol_version: 1,
            requested_workers: 2,
        },
        0,
    ) else {
        panic!()
    };
    let Message::MatrixInfo(info) = call(Message::CreateMatrix { rows: 10, cols: 1 }, session_id) else {
        panic!()
    };
    for (w, ep) in workers.iter().enumerate() {
        let stream = TcpStream::connect(&ep.addr).unwrap();
        let mut ww = BufWriter::new(stream.try_clone().unwrap());
        let mut wr = FrameReader::new(stream);
        let range = info.ranges[w];
        let mut batch = RowBatch::new(info.matrix_id);
        // Worker 1 never gets row 9.
        for i in range.row_start..range.row_end.min(9) {
            batch.push_row(i, &[i as f64]);
        }
        write_frame(&mut ww, &Message::SendRows(batch.clone()), session_id).unwrap();
        ww.flush().unwrap();
        match wr.read_frame().unwrap().unwrap().1 {
            Message::RowsAck { rows_received, .. } => assert_eq!(rows_received as usize, batch.len()),
            other => panic!("{other:?}"),
        }
        // Resending a row is a duplicate.
        write_frame(&mut ww, &Message::SendRows(batch), session_id).unwrap();
        ww.flush().unwrap();
        assert!(matches!(wr.read_frame().unwrap().unwrap().1, Message::Error { .. }));
    }
    match call(
        Message::SendComplete {
            matrix_id: info.matrix_id,
        },
        session_id,
    ) {
        Message::Error { code, message } => {
            assert_eq!(code, ErrorCode::IncompleteMatrix as u16);
            assert!(message.contains("1 row missing"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    // Unknown and repeated releases.
    assert!(matches!(
        call(Message::ReleaseMatrix { matrix_id: 99 }, session_id),
        Message::Error { code: 8, .. }
    ));
    assert!(matches!(
        call(
            Message::ReleaseMatrix {
                matrix_id: info.matrix_id
            },
            session_id
        ),
        Message::ReleaseMatrix { .. }
    ));
    assert!(matches!(
        call(
            Message::ReleaseMatrix {
                matrix_id: info.matrix_id
            },
            session_id
        ),
        Message::ReleaseMatrix { .. }
    ));
    assert!(matches!(call(Message::CloseSession, session_id), Message::CloseSession));
}

#[test]
fn finalize_twice_is_idempotent() {
    let srv = server(2);
    let driver = TcpStream::connect(srv.addr()).unwrap();
    let mut dw = BufWriter::new(driver.try_clone().unwrap());
    let mut dr = FrameReader::new(driver);
    let mut call = |msg: Message, session: u32| {
        write_frame(&mut dw, &msg, session).unwrap();
        dw.flush().unwrap();
        dr.read_frame().unwrap().unwrap().1
    };
    let Message::HandshakeAck { session_id, workers } = call(
        Message::Handshake {
            protocol_version: 1,
            requested_workers: 1,
        },
        0,
    ) else {
        panic!()
    };
    let Message::MatrixInfo(info) = call(Message::CreateMatrix { rows: 2, cols: 1 }, session_id) else {
        panic!()
    };
    let stream = TcpStream::connect(&workers[0].addr).unwrap();
    let mut ww = BufWriter::new(stream.try_clone().unwrap());
    let mut wr = FrameReader::new(stream);
    let mut batch = RowBatch::new(info.matrix_id);
    batch.push_row(1, &[1.0]);
    batch.push_row(0, &[0.0]);
    write_frame(&mut ww, &Message::SendRows(batch), session_id).unwrap();
    ww.flush().unwrap();
    wr.read_frame().unwrap().unwrap();
    for _ in 0..2 {
        assert_eq!(
            call(
                Message::SendComplete {
                    matrix_id: info.matrix_id
                },
                session_id
            ),
            Message::MatrixReady {
                matrix_id: info.matrix_id
            }
        );
    }
    assert!(matches!(
        call(Message::CreateMatrix { rows: 0, cols: 3 }, session_id),
        Message::Error { .. }
    ));
}

#[test]
fn routine_errors_map_to_codes() {
    let srv = server(2);
    let s = connect(&srv, 2);
    let lib = s.builtin().unwrap();
    let x = s
        .send_matrix(&LocalMatrix::from_row_major(6, 2, gaussian(6, 2, 3)).unwrap())
        .unwrap();
    let err = s.run(lib.library(), "foo", &[&x], Default::default()).unwrap_err();
    assert_eq!(code(err), Some(ErrorCode::UnknownRoutine));
    let bad = CgOptions {
        lambda: -1.0,
        ..Default::default()
    };
    assert_eq!(code(lib.cg(&x, &x, bad).unwrap_err()), Some(ErrorCode::SchemaViolation));
    assert_eq!(
        code(lib.svd(&x, 5, SvdOptions::default()).unwrap_err()),
        Some(ErrorCode::SchemaViolation)
    );
    let nan = s
        .send_matrix(&LocalMatrix::from_row_major(2, 1, vec![1.0, f64::NAN]).unwrap())
        .unwrap();
    assert_eq!(code(lib.qr(&nan).unwrap_err()), Some(ErrorCode::NumericalFailure));
    let err = s.register_library("nope", "nope").unwrap_err();
    assert_eq!(code(err), Some(ErrorCode::UnknownLibrary));
    // Failed tasks leave no output matrices behind.
    assert_eq!(srv.live_matrices(), 2);
}

#[test]
fn memory_budget_is_enforced() {
    let srv = Server::start(ServerConfig {
        memory_limit: 1000,
        ..ServerConfig::local(1)
    })
    .unwrap();
    let s = connect(&srv, 1);
    let err = s
        .send_matrix(&LocalMatrix::from_row_major(20, 10, vec![0.0; 200]).unwrap())
        .unwrap_err();
    assert_eq!(code(err), Some(ErrorCode::ResourceExhausted));
    assert!(err_text(&s).is_none());
}

fn err_text(s: &Session) -> Option<String> {
    s.send_matrix(&LocalMatrix::from_row_major(2, 2, vec![1.0; 4]).unwrap())
        .err()
        .map(|e| e.to_string())
}

#[test]
fn release_and_close_free_matrices() {
    let srv = server(2);
    let s = connect(&srv, 2);
    let m = LocalMatrix::from_row_major(4, 2, gaussian(4, 2, 5)).unwrap();
    let a = s.send_matrix(&m).unwrap();
    s.release(&a).unwrap();
    s.release(&a).unwrap();
    assert!(matches!(s.fetch_row_major(&a), Err(ClientError::InvalidHandle(_))));
    let handles: Vec<_> = (0..3).map(|_| s.send_matrix(&m).unwrap()).collect();
    assert_eq!(srv.live_matrices(), 3);
    s.close().unwrap();
    s.close().unwrap();
    assert!(matches!(
        s.fetch_row_major(&handles[0]),
        Err(ClientError::SessionClosed)
    ));
    assert!(wait_until(|| srv.live_matrices() == 0));
    assert_eq!(srv.used_bytes(), 0);
}

#[test]
fn abrupt_disconnect_is_reaped() {
    let srv = server(2);
    {
        let s = connect(&srv, 2);
        s.send_matrix(&LocalMatrix::from_row_major(4, 2, gaussian(4, 2, 5)).unwrap())
            .unwrap();
        assert_eq!(srv.live_matrices(), 1);
        std::mem::forget(s);
    }
    // The forgotten session still holds its sockets; a raw drop does not.
    let driver = TcpStream::connect(srv.addr()).unwrap();
    let mut dw = BufWriter::new(driver.try_clone().unwrap());
    let mut dr = FrameReader::new(driver);
    write_frame(
        &mut dw,
        &Message::Handshake {
            protocol_version: 1,
            requested_workers: 1,
        },
        0,
    )
    .unwrap();
    dw.flush().unwrap();
    let Some((_, Message::HandshakeAck { session_id, .. })) = dr.read_frame().unwrap() else {
        panic!()
    };
    write_frame(&mut dw, &Message::CreateMatrix { rows: 3, cols: 3 }, session_id).unwrap();
    dw.flush().unwrap();
    dr.read_frame().unwrap();
    assert_eq!(srv.live_matrices(), 2);
    drop(dw);
    drop(dr);
    assert!(wait_until(|| srv.live_matrices() == 1));
}

#[test]
fn sessions_cannot_see_each_other() {
    let srv = server(2);
    let a = connect(&srv, 2);
    let b = connect(&srv, 2);
    let h = a
        .send_matrix(&LocalMatrix::from_row_major(4, 2, gaussian(4, 2, 5)).unwrap())
        .unwrap();
    // A handle from another session is refused locally.
    assert!(matches!(b.fetch_row_major(&h), Err(ClientError::InvalidHandle(_))));
}

#[test]
fn qr_recomposes() {
    let srv = server(3);
    let s = connect(&srv, 3);
    let lib = s.builtin().unwrap();
    let (m, n) = (50, 6);
    let data = gaussian(m, n, 11);
    let a = s
        .send_matrix(&LocalMatrix::from_row_major(m, n, data.clone()).unwrap())
        .unwrap();
    let (q, r) = lib.qr(&a).unwrap();
    assert_eq!((q.rows(), q.cols(), r.rows(), r.cols()), (50, 6, 6, 6));
    let qm = DMatrix::from_row_slice(m, n, &s.fetch_row_major(&q).unwrap());
    let rm = DMatrix::from_row_slice(n, n, &s.fetch_row_major(&r).unwrap());
    let am = DMatrix::from_row_slice(m, n, &data);
    assert!((&am - &qm * &rm).norm() <= 1e-10 * am.norm());
}

#[test]
fn svd_outputs_have_contract_shapes() {
    let srv = server(2);
    let s = connect(&srv, 2);
    let lib = s.builtin().unwrap();
    let mut data = vec![0.0; 10 * 3];
    for (i, v) in [3.0, 2.0, 1.0].into_iter().enumerate() {
        data[i * 3 + i] = v;
    }
    let a = s
        .send_matrix(&LocalMatrix::from_row_major(10, 3, data).unwrap())
        .unwrap();
    let out = lib.svd(&a, 2, SvdOptions::default()).unwrap();
    assert!((out.s[0] - 3.0).abs() < 1e-12 && (out.s[1] - 2.0).abs() < 1e-12);
    assert_eq!((out.u.rows(), out.u.cols()), (10, 2));
    assert_eq!((out.v.rows(), out.v.cols()), (3, 2));
    // Logged S matches the returned S bit for bit.
    let log = srv.task_log();
    let rec = log.iter().find(|r| r.routine == "truncated_svd").unwrap();
    assert_eq!(rec.scalars.f64_series("s_"), out.s);
}

#[test]
fn chained_pipeline_matches_fetch_and_resend() {
    let srv = server(2);
    let s = connect(&srv, 2);
    let lib = s.builtin().unwrap();
    let (n, d, c) = (80, 5, 2);
    let x = s
        .send_matrix(&LocalMatrix::from_row_major(n, d, gaussian(n, d, 1)).unwrap())
        .unwrap();
    let y = s
        .send_matrix(&LocalMatrix::from_row_major(n, c, gaussian(n, c, 2)).unwrap())
        .unwrap();
    let opts = CgOptions {
        lambda: 1e-3,
        ..Default::default()
    };
    let z = lib.random_features(&x, 40, 2.0, 7).unwrap();
    let (w_chained, report) = lib.cg(&z, &y, opts).unwrap();
    assert!(report.converged);

    let z_local = s.fetch_matrix(&z).unwrap();
    let z2 = s.send_matrix(&z_local).unwrap();
    let (w_resent, _) = lib.cg(&z2, &y, opts).unwrap();
    let a = s.fetch_row_major(&w_chained).unwrap();
    let b = s.fetch_row_major(&w_resent).unwrap();
    let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    assert!(diff <= 1e-12 * norm, "{diff}");
}

#[test]
fn server_load_equals_file_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.bin");
    let data = gaussian(37, 5, 4);
    binfile::write_matrix(&path, 37, 5, &data).unwrap();
    let srv = server(4);
    let s = connect(&srv, 4);
    let lib = s.builtin().unwrap();
    let a = lib.load(path.to_str().unwrap()).unwrap();
    assert_eq!((a.rows(), a.cols()), (37, 5));
    assert_eq!(s.fetch_row_major(&a).unwrap(), data);
    let t = lib.tile_columns(&a, 3).unwrap();
    let tiled = s.fetch_row_major(&t).unwrap();
    assert_eq!(&tiled[..15], [&data[..5], &data[..5], &data[..5]].concat().as_slice());
    let err = lib.load(dir.path().join("missing.bin").to_str().unwrap()).unwrap_err();
    assert_eq!(code(err), Some(ErrorCode::SchemaViolation));
}

#[test]
fn shutdown_closes_everything() {
    let srv = server(2);
    let s = connect(&srv, 2);
    let addr = srv.addr();
    srv.shutdown();
    assert!(s.register_library("builtin", "builtin").is_err());
    assert!(TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_err());
}
