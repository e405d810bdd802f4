use pyo3::ffi::c_str;
use omniprune_py::omniprune_py as ext;
use pyo3::prelude::*;

#[test]
fn module_runs_under_embedded_interpreter() {
    pyo3::append_to_inittab!(ext);
    Python::initialize();
    Python::attach(|py| {
        let code = c_str!(
            r#"
import omniprune_py as op
cfg = op.ModelConfig.qwen25_omni_7b()
delta, c = op.solve_delta(cfg, 0.3, 1.4)
assert abs(c + 42.759) < 1e-3 and abs(delta - 0.0295) < 5e-4
assert op.build_schedule(cfg, 0.3, 1.4).drop_layers == [17, 19, 21, 24]
s = op.synth_generate(1, 2, 8, 20, 6, 4)
assert op.TokenStream.from_bytes(s.to_bytes()).positions == s.positions
small = op.ModelConfig(12, (6, 8, 9, 11))
t = op.run_pipeline(s, small, 0.3, 0.6, 1.3)
assert t.seq_len[-1] == 4
try:
    op.ModelConfig(28, (16, 16, 21, 24))
    raise SystemExit("bad boundaries accepted")
except ValueError:
    pass
"#
        );
        py.run(code, None, None).unwrap();
    });
}
