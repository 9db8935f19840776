use std::ffi::CString;

use offload::offload as module;
use pyo3::prelude::*;

const SCRIPT: &str = r#"
import offload
server = offload.Server(workers=3)
s = offload.Session(server.address, 3, batch_rows=4)
rows = [[float(i), float(i) * 0.5, -float(i)] for i in range(11)]
rows[2][1] = float("inf")
h = s.send_indexed(11, 3, [(i, rows[i]) for i in reversed(range(11))])
assert s.fetch_matrix(h) == rows
outs, scalars = s.run("tile_columns", [h], {"replicas": 2})
assert (outs[0].rows, outs[0].cols) == (11, 6)
try:
    s.run("tsqr", [h], {"bogus": True})
    raise AssertionError("schema violation was accepted")
except offload.ServerError as e:
    assert e.args[0] == 6
typ, sid, used, text = offload.decode_frame(bytes([0x10]) + (7).to_bytes(4, "little") + bytes(8))
assert (typ, sid, used) == (0x10, 7, 13), (typ, sid, used)
s.close()
assert not h.valid
server.shutdown()
"#;

#[test]
fn module_works_embedded() {
    pyo3::append_to_inittab!(module);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(SCRIPT).unwrap();
        py.run(&code, None, None).unwrap();
    });
}
