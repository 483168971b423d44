use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use tmc_core::io::checkpoint::{save_base, save_tangent, CheckpointMeta};
use tmc_core::{compose_many, Activation, BaseModel, NetworkSpec, ParamVector, TangentModel};
use tmc_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = tmc_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    base_path: CString,
    component_paths: Vec<CString>,
    base: Arc<BaseModel>,
    components: Vec<TangentModel>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::mlp(3, &[5], 4, Activation::Relu).unwrap();
    let base = Arc::new(BaseModel::init(spec, 11));
    let bp = dir.path().join("base.ckpt");
    save_base(&bp, &base, &CheckpointMeta::default()).unwrap();
    let n = base.spec().param_count();
    let mut components = Vec::new();
    let mut component_paths = Vec::new();
    for t in 1..=3u32 {
        let d = ParamVector::from_vec(
            (0..n)
                .map(|i| ((i as f64) * 0.37 + t as f64).sin() * 0.1)
                .collect(),
        );
        let c = TangentModel::component(Arc::clone(&base), d)
            .unwrap()
            .tracked(t);
        let p = dir.path().join(format!("c{t}.ckpt"));
        save_tangent(&p, &c, &CheckpointMeta::default()).unwrap();
        component_paths.push(cpath(&p));
        components.push(c);
    }
    Fixture {
        base_path: cpath(&bp),
        _dir: dir,
        component_paths,
        base,
        components,
    }
}

unsafe fn load_all(f: &Fixture) -> (*mut TmcBase, Vec<*mut TmcTangent>) {
    let mut base = ptr::null_mut();
    assert_eq!(
        tmc_base_load(f.base_path.as_ptr(), &mut base),
        TmcStatus::Ok
    );
    let comps = f
        .component_paths
        .iter()
        .map(|p| {
            let mut c = ptr::null_mut();
            assert_eq!(tmc_tangent_load(base, p.as_ptr(), &mut c), TmcStatus::Ok);
            c
        })
        .collect();
    (base, comps)
}

#[test]
fn forward_matches_the_library() {
    let f = fixture();
    unsafe {
        let (base, comps) = load_all(&f);
        assert_eq!(tmc_base_input_dim(base), 3);
        assert_eq!(tmc_base_num_classes(base), 4);
        let x = [0.3, -1.2, 0.8];
        let mut out = [0.0; 4];
        assert_eq!(
            tmc_base_forward(base, x.as_ptr(), 3, out.as_mut_ptr(), 4),
            TmcStatus::Ok
        );
        assert_eq!(out.to_vec(), f.base.forward(&x).unwrap());
        assert_eq!(
            tmc_tangent_forward(comps[1], x.as_ptr(), 3, out.as_mut_ptr(), 4),
            TmcStatus::Ok
        );
        assert_eq!(out.to_vec(), f.components[1].forward(&x).unwrap());
        for c in comps {
            tmc_tangent_free(c);
        }
        tmc_base_free(base);
    }
}

#[test]
fn compose_then_unlearn_round_trip() {
    let f = fixture();
    unsafe {
        let (base, comps) = load_all(&f);
        let handles: Vec<*const TmcTangent> = comps.iter().map(|&c| c as *const _).collect();
        let mut composed = ptr::null_mut();
        assert_eq!(
            tmc_tangent_compose(handles.as_ptr(), 3, ptr::null(), &mut composed),
            TmcStatus::Ok
        );
        assert_eq!(tmc_tangent_task_count(composed), 3);

        let mut removed = ptr::null_mut();
        assert_eq!(
            tmc_tangent_unlearn(composed, 2, 1, &mut removed),
            TmcStatus::Ok
        );
        assert_eq!(tmc_tangent_task_count(removed), 2);

        let refs = [&f.components[0], &f.components[2]];
        let fresh = compose_many(&refs, &[0.5, 0.5]).unwrap();
        let x = [1.0, 0.5, -0.25];
        let mut out = [0.0; 4];
        assert_eq!(
            tmc_tangent_forward(removed, x.as_ptr(), 3, out.as_mut_ptr(), 4),
            TmcStatus::Ok
        );
        for (a, b) in out.iter().zip(fresh.forward(&x).unwrap()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }

        let weights = [0.2, 0.3, 0.5];
        let mut weighted = ptr::null_mut();
        assert_eq!(
            tmc_tangent_compose(handles.as_ptr(), 3, weights.as_ptr(), &mut weighted),
            TmcStatus::Ok
        );
        let refs: Vec<&TangentModel> = f.components.iter().collect();
        let direct = compose_many(&refs, &weights).unwrap();
        assert_eq!(
            tmc_tangent_forward(weighted, x.as_ptr(), 3, out.as_mut_ptr(), 4),
            TmcStatus::Ok
        );
        assert_eq!(out.to_vec(), direct.forward(&x).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let saved = cpath(&dir.path().join("removed.ckpt"));
        assert_eq!(tmc_tangent_save(removed, saved.as_ptr()), TmcStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(
            tmc_tangent_load(base, saved.as_ptr(), &mut back),
            TmcStatus::Ok
        );
        assert_eq!(tmc_tangent_task_count(back), 2);

        for h in [composed, removed, weighted, back].into_iter().chain(comps) {
            tmc_tangent_free(h);
        }
        tmc_base_free(base);
    }
}

#[test]
fn failures_report_codes_and_messages() {
    let f = fixture();
    unsafe {
        let (base, comps) = load_all(&f);
        let mut out = ptr::null_mut();

        let missing = CString::new("/nonexistent/base.ckpt").unwrap();
        assert_eq!(tmc_base_load(missing.as_ptr(), &mut out), TmcStatus::Io);
        assert!(last_error().contains("nonexistent"));

        assert_eq!(tmc_base_load(ptr::null(), &mut out), TmcStatus::NullPointer);
        assert_eq!(
            tmc_base_load(f.base_path.as_ptr(), ptr::null_mut()),
            TmcStatus::NullPointer
        );
        assert!(out.is_null());

        // A tangent checkpoint is not a base checkpoint.
        assert_eq!(
            tmc_base_load(f.component_paths[0].as_ptr(), &mut out),
            TmcStatus::Checkpoint
        );

        // Components refuse an anchor they were not trained on.
        let dir = tempfile::tempdir().unwrap();
        let other_path = dir.path().join("other.ckpt");
        let other = BaseModel::init(f.base.spec().clone(), 12);
        save_base(&other_path, &other, &CheckpointMeta::default()).unwrap();
        let other_c = cpath(&other_path);
        let mut other_h = ptr::null_mut();
        assert_eq!(tmc_base_load(other_c.as_ptr(), &mut other_h), TmcStatus::Ok);
        let mut t = ptr::null_mut();
        assert_eq!(
            tmc_tangent_load(other_h, f.component_paths[0].as_ptr(), &mut t),
            TmcStatus::Checkpoint
        );
        assert!(t.is_null());

        let x = [0.0; 3];
        let mut small = [0.0; 2];
        assert_eq!(
            tmc_base_forward(base, x.as_ptr(), 3, small.as_mut_ptr(), 2),
            TmcStatus::BufferTooSmall
        );
        let mut logits = [0.0; 4];
        assert_eq!(
            tmc_base_forward(base, x.as_ptr(), 2, logits.as_mut_ptr(), 4),
            TmcStatus::Invalid
        );

        let handles: Vec<*const TmcTangent> = comps.iter().map(|&c| c as *const _).collect();
        assert_eq!(
            tmc_tangent_compose(handles.as_ptr(), 0, ptr::null(), &mut t),
            TmcStatus::BadArgument
        );
        let bad = [0.5, f64::NAN, 0.5];
        assert_eq!(
            tmc_tangent_compose(handles.as_ptr(), 3, bad.as_ptr(), &mut t),
            TmcStatus::Numeric
        );

        let mut composed = ptr::null_mut();
        assert_eq!(
            tmc_tangent_compose(handles.as_ptr(), 3, ptr::null(), &mut composed),
            TmcStatus::Ok
        );
        assert_eq!(tmc_tangent_unlearn(composed, 9, 1, &mut t), TmcStatus::Task);
        assert!(last_error().contains('9'));
        assert!(t.is_null());

        // Null handles are tolerated by the accessors and the destructors.
        assert_eq!(tmc_base_input_dim(ptr::null()), 0);
        assert_eq!(tmc_tangent_task_count(ptr::null()), 0);
        tmc_tangent_free(ptr::null_mut());
        tmc_base_free(ptr::null_mut());

        tmc_tangent_free(composed);
        for c in comps {
            tmc_tangent_free(c);
        }
        tmc_base_free(other_h);
        tmc_base_free(base);
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tmc.h")).unwrap();
    for name in [
        "tmc_last_error_message",
        "tmc_version",
        "tmc_base_load",
        "tmc_base_free",
        "tmc_base_input_dim",
        "tmc_base_num_classes",
        "tmc_base_forward",
        "tmc_tangent_load",
        "tmc_tangent_save",
        "tmc_tangent_free",
        "tmc_tangent_task_count",
        "tmc_tangent_forward",
        "tmc_tangent_compose",
        "tmc_tangent_unlearn",
        "typedef struct TmcBase TmcBase",
        "TMC_STATUS_CHECKPOINT = 6",
    ] {
        assert!(header.contains(name), "{name} missing from tmc.h");
    }
    let v = unsafe { CStr::from_ptr(tmc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
