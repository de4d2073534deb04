//! Thin layer over the system BLAS.
//!
//! OpenBLAS selects its compute kernels in a library constructor, so linking
//! it at build time runs CPU detection before `main` — too early to fix the
//! misdetection some virtualized CPUs trigger (they fall back to a ~4x slower
//! generic kernel). Loading the library lazily via `dlopen` lets us stage
//! `OPENBLAS_CORETYPE` first. All heavy matrix products funnel through
//! [`Gemm::gemm`].

use std::ffi::c_int;
use std::sync::OnceLock;

const CBLAS_ROW_MAJOR: c_int = 101;
const CBLAS_NO_TRANS: c_int = 111;
const CBLAS_TRANS: c_int = 112;

#[allow(clippy::too_many_arguments)]
type SgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int,
    f32, *const f32, c_int, *const f32, c_int, f32, *mut f32, c_int,
);
#[allow(clippy::too_many_arguments)]
type DgemmFn = unsafe extern "C" fn(
    c_int, c_int, c_int, c_int, c_int, c_int,
    f64, *const f64, c_int, *const f64, c_int, f64, *mut f64, c_int,
);
type SetNumThreadsFn = unsafe extern "C" fn(c_int);

struct BlasLib {
    sgemm: SgemmFn,
    dgemm: DgemmFn,
}

static BLAS: OnceLock<BlasLib> = OnceLock::new();

unsafe fn dlsym_req(handle: *mut libc::c_void, name: &[u8]) -> *mut libc::c_void {
    let p = libc::dlsym(handle, name.as_ptr().cast());
    assert!(
        !p.is_null(),
        "symbol {} missing from BLAS library",
        String::from_utf8_lossy(&name[..name.len() - 1])
    );
    p
}

fn open_blas() -> BlasLib {
    // Must happen before the library constructor runs its CPU detection.
    #[cfg(target_arch = "x86_64")]
    if std::env::var_os("OPENBLAS_CORETYPE").is_none() && is_x86_feature_detected!("avx512f") {
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
    }
    unsafe {
        let mut handle = std::ptr::null_mut();
        for name in [b"libopenblas.so.0\0".as_slice(), b"libopenblas.so\0".as_slice()] {
            handle = libc::dlopen(name.as_ptr().cast(), libc::RTLD_NOW | libc::RTLD_LOCAL);
            if !handle.is_null() {
                break;
            }
        }
        assert!(
            !handle.is_null(),
            "libopenblas not found; install the OpenBLAS shared library"
        );
        // single-threaded by default so results do not depend on core count
        if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
            let p = libc::dlsym(handle, b"openblas_set_num_threads\0".as_ptr().cast());
            if !p.is_null() {
                let set: SetNumThreadsFn = std::mem::transmute(p);
                set(1);
            }
        }
        BlasLib {
            sgemm: std::mem::transmute(dlsym_req(handle, b"cblas_sgemm\0")),
            dgemm: std::mem::transmute(dlsym_req(handle, b"cblas_dgemm\0")),
        }
    }
}

fn blas() -> &'static BlasLib {
    BLAS.get_or_init(open_blas)
}

/// Scalars with a BLAS gemm kernel.
pub trait Gemm: Copy + 'static {
    /// Row-major `c = alpha * op(a) @ op(b) + beta * c` where `op` optionally
    /// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

fn trans_flag(t: bool) -> c_int {
    if t {
        CBLAS_TRANS
    } else {
        CBLAS_NO_TRANS
    }
}

macro_rules! impl_gemm {
    ($ty:ty, $field:ident) => {
        impl Gemm for $ty {
            fn gemm(
                ta: bool,
                tb: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                lda: usize,
                b: &[Self],
                ldb: usize,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                debug_assert!(a.len() >= if ta { k * lda } else { m * lda }.max(1));
                debug_assert!(b.len() >= if tb { n * ldb } else { k * ldb }.max(1));
                debug_assert!(c.len() >= m * ldc);
                let f = blas().$field;
                unsafe {
                    f(
                        CBLAS_ROW_MAJOR,
                        trans_flag(ta),
                        trans_flag(tb),
                        m as c_int,
                        n as c_int,
                        k as c_int,
                        alpha,
                        a.as_ptr(),
                        lda as c_int,
                        b.as_ptr(),
                        ldb as c_int,
                        beta,
                        c.as_mut_ptr(),
                        ldc as c_int,
                    );
                }
            }
        }
    };
}

impl_gemm!(f32, sgemm);
impl_gemm!(f64, dgemm);
