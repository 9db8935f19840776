//! Python bindings: an in-process server, client sessions and matrix handles.

use std::sync::Mutex;

use offload_core::client::{self, Builtin, CgOptions, ClientConfig, ClientError, LibraryRef, LocalMatrix, SvdOptions};
use offload_core::protocol::{self, ParamMap, ParamValue};
use offload_core::server::{Server as CoreServer, ServerConfig, ServerHandle};
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyString};
use pyo3::IntoPyObjectExt;

pyo3::create_exception!(offload, OffloadError, PyException);
pyo3::create_exception!(offload, ServerError, OffloadError);

fn to_py(e: ClientError) -> PyErr {
    match e {
        ClientError::Server { code, message } => ServerError::new_err((code, message)),
        other => OffloadError::new_err(other.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn dense(rows: &Rows) -> PyResult<LocalMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(PyValueError::new_err(format!(
                "row {i} has {} values, expected {cols}",
                r.len()
            )));
        }
        flat.extend_from_slice(r);
    }
    LocalMatrix::from_row_major(rows.len(), cols, flat).map_err(to_py)
}

fn value_to_py(py: Python<'_>, v: &ParamValue) -> PyResult<Py<PyAny>> {
    match v {
        ParamValue::F64(x) => x.into_py_any(py),
        ParamValue::I64(x) => x.into_py_any(py),
        ParamValue::Str(x) => x.into_py_any(py),
        ParamValue::Bool(x) => x.into_py_any(py),
        ParamValue::Matrix(x) => x.into_py_any(py),
    }
}

fn params_to_py<'py>(py: Python<'py>, map: &ParamMap) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in map.iter() {
        d.set_item(k, value_to_py(py, v)?)?;
    }
    Ok(d)
}

fn params_from_py(d: Option<&Bound<'_, PyDict>>) -> PyResult<ParamMap> {
    let mut map = ParamMap::new();
    let Some(d) = d else { return Ok(map) };
    for (k, v) in d.iter() {
        let key: String = k.extract()?;
        // bool first: Python bools are ints.
        if v.is_instance_of::<PyBool>() {
            map.insert(key, v.extract::<bool>()?);
        } else if v.is_instance_of::<PyInt>() {
            map.insert(key, v.extract::<i64>()?);
        } else if v.is_instance_of::<PyFloat>() {
            map.insert(key, v.extract::<f64>()?);
        } else if v.is_instance_of::<PyString>() {
            map.insert(key, v.extract::<String>()?);
        } else if let Ok(h) = v.extract::<PyRef<'_, MatrixHandle>>() {
            map.insert(key, ParamValue::Matrix(h.inner.id()));
        } else {
            return Err(PyValueError::new_err(format!(
                "parameter {key:?} has an unsupported type"
            )));
        }
    }
    Ok(map)
}

/// A server running inside this process.
#[pyclass(module = "offload")]
struct Server {
    handle: Mutex<Option<ServerHandle>>,
    address: String,
}

#[pymethods]
impl Server {
    #[new]
    #[pyo3(signature = (workers = 2, host = "127.0.0.1", port = 0, memory_limit = None))]
    fn new(workers: usize, host: &str, port: u16, memory_limit: Option<u64>) -> PyResult<Self> {
        if workers == 0 {
            return Err(PyValueError::new_err("workers must be at least 1"));
        }
        let mut config = ServerConfig::local(workers);
        config.bind = format!("{host}:{port}");
        if let Some(limit) = memory_limit {
            config.memory_limit = limit;
        }
        let handle = CoreServer::start(config).map_err(|e| OffloadError::new_err(e.to_string()))?;
        let address = handle.addr().to_string();
        Ok(Server {
            handle: Mutex::new(Some(handle)),
            address,
        })
    }

    #[getter]
    fn address(&self) -> String {
        self.address.clone()
    }

    fn live_matrices(&self) -> PyResult<usize> {
        self.with(|h| h.live_matrices())
    }

    fn active_sessions(&self) -> PyResult<usize> {
        self.with(|h| h.active_sessions())
    }

    /// One dict per executed task.
    fn task_log<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let log = self.with(|h| h.task_log())?;
        log.iter()
            .map(|t| {
                let d = PyDict::new(py);
                d.set_item("session_id", t.session_id)?;
                d.set_item("routine", &t.routine)?;
                d.set_item("inputs", t.inputs.clone())?;
                d.set_item("outputs", t.outputs.clone())?;
                d.set_item("input_bytes", t.input_bytes)?;
                d.set_item("compute_seconds", t.compute_seconds)?;
                d.set_item("scalars", params_to_py(py, &t.scalars)?)?;
                d.set_item("error", t.error.clone())?;
                Ok(d)
            })
            .collect()
    }

    fn shutdown(&self, py: Python<'_>) {
        let handle = self.handle.lock().unwrap().take();
        if let Some(h) = handle {
            py.detach(move || h.shutdown());
        }
    }
}

impl Server {
    fn with<T>(&self, f: impl FnOnce(&ServerHandle) -> T) -> PyResult<T> {
        match self.handle.lock().unwrap().as_ref() {
            Some(h) => Ok(f(h)),
            None => Err(OffloadError::new_err("server is shut down")),
        }
    }
}

/// Proxy for a server-resident matrix.
#[pyclass(module = "offload", frozen, from_py_object)]
#[derive(Clone)]
struct MatrixHandle {
    inner: client::MatrixHandle,
}

#[pymethods]
impl MatrixHandle {
    #[getter]
    fn id(&self) -> u64 {
        self.inner.id()
    }

    #[getter]
    fn rows(&self) -> u64 {
        self.inner.rows()
    }

    #[getter]
    fn cols(&self) -> u64 {
        self.inner.cols()
    }

    #[getter]
    fn valid(&self) -> bool {
        self.inner.is_valid()
    }

    fn __repr__(&self) -> String {
        format!(
            "MatrixHandle(id={}, shape=({}, {}))",
            self.id(),
            self.rows(),
            self.cols()
        )
    }
}

fn wrap(inner: client::MatrixHandle) -> MatrixHandle {
    MatrixHandle { inner }
}

/// A client session bound to `workers` server workers.
#[pyclass(module = "offload", frozen)]
struct Session {
    inner: client::Session,
    lib: LibraryRef,
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (address, workers, batch_rows = 128))]
    fn new(py: Python<'_>, address: String, workers: u16, batch_rows: usize) -> PyResult<Self> {
        py.detach(|| {
            let inner = client::Session::connect(ClientConfig::new(address, workers).batch_rows(batch_rows))?;
            let lib = inner.builtin()?.library();
            Ok(Session { inner, lib })
        })
        .map_err(to_py)
    }

    #[getter]
    fn id(&self) -> u32 {
        self.inner.id()
    }

    #[getter]
    fn workers(&self) -> usize {
        self.inner.worker_endpoints().len()
    }

    /// Uploads a list of equal-length rows.
    fn send_matrix(&self, py: Python<'_>, rows: Rows) -> PyResult<MatrixHandle> {
        let m = dense(&rows)?;
        py.detach(|| self.inner.send_matrix(&m)).map(wrap).map_err(to_py)
    }

    /// Uploads rows given as `(index, values)` pairs, in any order.
    fn send_indexed(
        &self,
        py: Python<'_>,
        rows: u64,
        cols: usize,
        data: Vec<(u64, Vec<f64>)>,
    ) -> PyResult<MatrixHandle> {
        let mut m = LocalMatrix::new(rows, cols);
        for (i, r) in &data {
            m.push_row(*i, r).map_err(to_py)?;
        }
        py.detach(|| self.inner.send_matrix(&m)).map(wrap).map_err(to_py)
    }

    fn fetch_matrix(&self, py: Python<'_>, h: &MatrixHandle) -> PyResult<Rows> {
        let cols = h.inner.cols() as usize;
        let flat = py.detach(|| self.inner.fetch_row_major(&h.inner)).map_err(to_py)?;
        Ok(flat.chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
    }

    /// Runs any routine of the builtin library; returns `(outputs, scalars)`.
    #[pyo3(signature = (routine, inputs, params = None))]
    fn run<'py>(
        &self,
        py: Python<'py>,
        routine: &str,
        inputs: Vec<MatrixHandle>,
        params: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(Vec<MatrixHandle>, Bound<'py, PyDict>)> {
        let params = params_from_py(params)?;
        let refs: Vec<&client::MatrixHandle> = inputs.iter().map(|h| &h.inner).collect();
        let out = py
            .detach(|| self.inner.run(self.lib, routine, &refs, params))
            .map_err(to_py)?;
        Ok((
            out.outputs.into_iter().map(wrap).collect(),
            params_to_py(py, &out.scalars)?,
        ))
    }

    fn qr(&self, py: Python<'_>, a: &MatrixHandle) -> PyResult<(MatrixHandle, MatrixHandle)> {
        let (q, r) = py.detach(|| self.builtin().qr(&a.inner)).map_err(to_py)?;
        Ok((wrap(q), wrap(r)))
    }

    /// Ridge solve; returns `(W, summary)`.
    #[pyo3(signature = (x, y, lam = 1e-5, tol = 1e-12, max_iter = 1000))]
    fn cg<'py>(
        &self,
        py: Python<'py>,
        x: &MatrixHandle,
        y: &MatrixHandle,
        lam: f64,
        tol: f64,
        max_iter: i64,
    ) -> PyResult<(MatrixHandle, Bound<'py, PyDict>)> {
        let opts = CgOptions {
            lambda: lam,
            tol,
            max_iter,
        };
        let (w, s) = py
            .detach(|| self.builtin().cg(&x.inner, &y.inner, opts))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("iterations", s.iterations)?;
        d.set_item("column_iterations", s.column_iterations)?;
        d.set_item("residuals", s.residuals)?;
        d.set_item("converged", s.converged)?;
        d.set_item("iter_time_mean", s.iter_time_mean)?;
        d.set_item("iter_time_std", s.iter_time_std)?;
        Ok((wrap(w), d))
    }

    /// Truncated SVD; returns `(U, S, V)`.
    #[pyo3(signature = (a, k, seed = 0, tol = None, max_subspace = None))]
    fn svd(
        &self,
        py: Python<'_>,
        a: &MatrixHandle,
        k: usize,
        seed: i64,
        tol: Option<f64>,
        max_subspace: Option<i64>,
    ) -> PyResult<(MatrixHandle, Vec<f64>, MatrixHandle)> {
        let opts = SvdOptions {
            tol,
            max_subspace,
            seed,
        };
        let r = py.detach(|| self.builtin().svd(&a.inner, k, opts)).map_err(to_py)?;
        Ok((wrap(r.u), r.s, wrap(r.v)))
    }

    #[pyo3(signature = (x, d, sigma = 10.0, seed = 0))]
    fn random_features(
        &self,
        py: Python<'_>,
        x: &MatrixHandle,
        d: usize,
        sigma: f64,
        seed: i64,
    ) -> PyResult<MatrixHandle> {
        py.detach(|| self.builtin().random_features(&x.inner, d, sigma, seed))
            .map(wrap)
            .map_err(to_py)
    }

    /// Server-side read of a binary matrix file.
    fn load(&self, py: Python<'_>, path: &str) -> PyResult<MatrixHandle> {
        py.detach(|| self.builtin().load(path)).map(wrap).map_err(to_py)
    }

    fn tile_columns(&self, py: Python<'_>, a: &MatrixHandle, replicas: usize) -> PyResult<MatrixHandle> {
        py.detach(|| self.builtin().tile_columns(&a.inner, replicas))
            .map(wrap)
            .map_err(to_py)
    }

    fn release(&self, py: Python<'_>, h: &MatrixHandle) -> PyResult<()> {
        py.detach(|| self.inner.release(&h.inner)).map_err(to_py)
    }

    fn close(&self, py: Python<'_>) -> PyResult<()> {
        py.detach(|| self.inner.close()).map_err(to_py)
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(&self, py: Python<'_>, _t: Py<PyAny>, _v: Py<PyAny>, _tb: Py<PyAny>) -> PyResult<bool> {
        self.close(py)?;
        Ok(false)
    }
}

impl Session {
    fn builtin(&self) -> Builtin<'_> {
        Builtin::new(&self.inner, self.lib)
    }
}

/// Decodes one frame from the front of `data`: `(msg_type, session_id, consumed, message)`.
#[pyfunction]
fn decode_frame(data: &[u8]) -> PyResult<(u8, u32, usize, String)> {
    let d = protocol::decode(data).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((
        d.message.msg_type(),
        d.session_id,
        d.consumed,
        format!("{:?}", d.message),
    ))
}

/// Block-row ranges `(start, end)` per worker for a `rows`-row matrix.
#[pyfunction]
fn row_ranges(rows: u64, workers: usize) -> PyResult<Vec<(u64, u64)>> {
    if workers == 0 {
        return Err(PyValueError::new_err("workers must be at least 1"));
    }
    let layout = offload_core::store::plan_layout(rows, 1, workers);
    Ok((0..workers)
        .map(|w| {
            let r = layout.range(w);
            (r.row_start, r.row_end)
        })
        .collect())
}

#[pyfunction]
fn write_matrix_file(path: &str, rows: Rows) -> PyResult<()> {
    let cols = rows.first().map_or(0, Vec::len);
    let m = dense(&rows)?;
    offload_core::binfile::write_matrix(path, rows.len() as u64, cols as u64, &m.to_row_major().map_err(to_py)?)
        .map_err(|e| OffloadError::new_err(e.to_string()))
}

#[pyfunction]
fn read_matrix_file(path: &str) -> PyResult<Rows> {
    let (h, data) = offload_core::binfile::read_matrix(path).map_err(|e| OffloadError::new_err(e.to_string()))?;
    Ok(data.chunks(h.cols.max(1) as usize).map(<[f64]>::to_vec).collect())
}

/// Module initializer; `append_to_inittab!(offload)` embeds it.
#[pymodule]
pub fn offload(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PROTOCOL_VERSION", protocol::PROTOCOL_VERSION)?;
    m.add("OffloadError", m.py().get_type::<OffloadError>())?;
    m.add("ServerError", m.py().get_type::<ServerError>())?;
    m.add_class::<Server>()?;
    m.add_class::<Session>()?;
    m.add_class::<MatrixHandle>()?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(row_ranges, m)?)?;
    m.add_function(wrap_pyfunction!(write_matrix_file, m)?)?;
    m.add_function(wrap_pyfunction!(read_matrix_file, m)?)?;
    Ok(())
}
