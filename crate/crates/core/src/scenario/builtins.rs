//! Routines a scenario can register by name.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::lotr::{Handler, LotrError};

/// Offset of the password digest inside privileged-user data.
pub const PASSWORD_DIGEST_OFFSET: u64 = 0;
/// Offset of the signing key inside privileged-user data.
pub const SIGNING_KEY_OFFSET: u64 = 0x100;
pub const DIGEST_LEN: u64 = 32;

/// Name and natural arity of every built-in routine.
pub const BUILTINS: [(&str, usize); 10] = [
    ("null", 0),
    ("echo", 1),
    ("add", 2),
    ("check_password", 2),
    ("load_password", 2),
    ("sign", 3),
    ("read_arg", 1),
    ("peek", 1),
    ("alloc", 1),
    ("reenter", 2),
];

fn arg(a: &[u64], i: usize) -> u64 {
    a.get(i).copied().unwrap_or(0)
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn builtin(name: &str) -> Option<Handler> {
    let h: Handler = match name {
        "null" => Arc::new(|_, _| Ok(0)),
        "echo" => Arc::new(|_, a| Ok(arg(a, 0))),
        "add" => Arc::new(|_, a| Ok(arg(a, 0).wrapping_add(arg(a, 1)))),
        "check_password" => Arc::new(|ctx, a| {
            let candidate = ctx.read(arg(a, 0), arg(a, 1))?;
            let at = ctx.config().privuser_data.start + PASSWORD_DIGEST_OFFSET;
            let stored = ctx.read(at, DIGEST_LEN)?;
            Ok(ct_eq(&Sha256::digest(&candidate), &stored) as u64)
        }),
        "load_password" => Arc::new(|ctx, a| {
            let password = ctx.read(arg(a, 0), arg(a, 1))?;
            let at = ctx.config().privuser_data.start + PASSWORD_DIGEST_OFFSET;
            ctx.write(at, &Sha256::digest(&password))?;
            Ok(0)
        }),
        // Keyed digest over the message; the key never leaves privileged-user
        // memory. Scratch space comes from the privileged-user heap.
        "sign" => Arc::new(|ctx, a| {
            let (msg_ptr, msg_len, out) = (arg(a, 0), arg(a, 1), arg(a, 2));
            let key_at = ctx.config().privuser_data.start + SIGNING_KEY_OFFSET;
            let key = ctx.read(key_at, DIGEST_LEN)?;
            let msg = ctx.read(msg_ptr, msg_len)?;
            let scratch = ctx.alloc(DIGEST_LEN + msg_len)?;
            ctx.write(scratch, &key)?;
            ctx.write(scratch + DIGEST_LEN, &msg)?;
            let joined = ctx.read(scratch, DIGEST_LEN + msg_len)?;
            ctx.write(out, &Sha256::digest(&joined))?;
            Ok(DIGEST_LEN)
        }),
        "read_arg" => Arc::new(|ctx, a| ctx.read_u64(arg(a, 0))),
        "peek" => Arc::new(|ctx, a| ctx.read_u64(arg(a, 0))),
        "alloc" => Arc::new(|ctx, a| match ctx.alloc(arg(a, 0)) {
            Ok(p) => Ok(p),
            Err(LotrError::OutOfMemory { .. }) => Ok(0),
            Err(e) => Err(e),
        }),
        "reenter" => Arc::new(|ctx, a| ctx.privcall(arg(a, 0), &[arg(a, 1)])),
        _ => return None,
    };
    Some(h)
}
