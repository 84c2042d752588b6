//! Python bindings for the PQClean Falcon and SPHINCS+ signature
//! implementations (via the pqcrypto crates).
//!
//! Every function releases the GIL while the underlying C code runs, so
//! adapters can be driven from one thread per simulated client. All key and
//! signature material crosses the boundary as plain byte strings; `verify`
//! never raises and maps any malformed input to `false`.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pqcrypto_traits::sign::{DetachedSignature, PublicKey, SecretKey};

macro_rules! pqc_api {
    ($keypair:ident, $sign:ident, $verify:ident, $lengths:ident, $m:path) => {
        #[pyfunction]
        fn $keypair(py: Python<'_>) -> (Vec<u8>, Vec<u8>) {
            use $m as s;
            py.detach(|| {
                let (pk, sk) = s::keypair();
                (pk.as_bytes().to_vec(), sk.as_bytes().to_vec())
            })
        }

        #[pyfunction]
        fn $sign(py: Python<'_>, secret_key: Vec<u8>, message: Vec<u8>) -> PyResult<Vec<u8>> {
            use $m as s;
            py.detach(|| {
                let sk = <s::SecretKey as SecretKey>::from_bytes(&secret_key)
                    .map_err(|e| PyValueError::new_err(format!("bad secret key: {e}")))?;
                Ok(s::detached_sign(&message, &sk).as_bytes().to_vec())
            })
        }

        #[pyfunction]
        fn $verify(
            py: Python<'_>,
            signature: Vec<u8>,
            message: Vec<u8>,
            public_key: Vec<u8>,
        ) -> bool {
            use $m as s;
            py.detach(|| {
                let pk = match <s::PublicKey as PublicKey>::from_bytes(&public_key) {
                    Ok(k) => k,
                    Err(_) => return false,
                };
                let sig = match <s::DetachedSignature as DetachedSignature>::from_bytes(&signature)
                {
                    Ok(v) => v,
                    Err(_) => return false,
                };
                s::verify_detached_signature(&sig, &message, &pk).is_ok()
            })
        }

        /// (public_key_len, secret_key_len, signature_max_len)
        #[pyfunction]
        fn $lengths() -> (usize, usize, usize) {
            use $m as s;
            (s::public_key_bytes(), s::secret_key_bytes(), s::signature_bytes())
        }
    };
}

pqc_api!(
    falcon512_keypair,
    falcon512_sign,
    falcon512_verify,
    falcon512_lengths,
    pqcrypto_falcon::falcon512
);

pqc_api!(
    falcon1024_keypair,
    falcon1024_sign,
    falcon1024_verify,
    falcon1024_lengths,
    pqcrypto_falcon::falcon1024
);

pqc_api!(
    sphincs128s_keypair,
    sphincs128s_sign,
    sphincs128s_verify,
    sphincs128s_lengths,
    pqcrypto_sphincsplus::sphincssha2128ssimple
);

pqc_api!(
    sphincs128f_keypair,
    sphincs128f_sign,
    sphincs128f_verify,
    sphincs128f_lengths,
    pqcrypto_sphincsplus::sphincssha2128fsimple
);

#[pymodule]
fn _pqclean(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(falcon512_keypair, m)?)?;
    m.add_function(wrap_pyfunction!(falcon512_sign, m)?)?;
    m.add_function(wrap_pyfunction!(falcon512_verify, m)?)?;
    m.add_function(wrap_pyfunction!(falcon512_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(falcon1024_keypair, m)?)?;
    m.add_function(wrap_pyfunction!(falcon1024_sign, m)?)?;
    m.add_function(wrap_pyfunction!(falcon1024_verify, m)?)?;
    m.add_function(wrap_pyfunction!(falcon1024_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128s_keypair, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128s_sign, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128s_verify, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128s_lengths, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128f_keypair, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128f_sign, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128f_verify, m)?)?;
    m.add_function(wrap_pyfunction!(sphincs128f_lengths, m)?)?;
    Ok(())
}
