//! Per-workspace lock file holding the owner's pid.
//!
//! The lock is published atomically with `link(2)`, so readers never observe
//! an empty or partial lock file. A lock whose recorded owner is no longer
//! alive is considered stale and taken over.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".lock";

#[derive(Debug)]
pub enum LockError {
    Held { pid: u32 },
    Io(io::Error),
}

/// Exclusive ownership of a store directory. Released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
    pid: u32,
}

impl WorkspaceLock {
    pub fn acquire(store_dir: &Path) -> Result<WorkspaceLock, LockError> {
        let path = store_dir.join(LOCK_FILE);
        let pid = std::process::id();
        let staging = store_dir.join(format!(".lock.{pid}.{:08x}", rand::random::<u32>()));
        fs::write(&staging, pid.to_string()).map_err(LockError::Io)?;
        let result = Self::publish(&staging, &path, pid);
        let _ = fs::remove_file(&staging);
        result
    }

    fn publish(staging: &Path, path: &Path, pid: u32) -> Result<WorkspaceLock, LockError> {
        for _ in 0..2 {
            match fs::hard_link(staging, path) {
                Ok(()) => {
                    return Ok(WorkspaceLock {
                        path: path.to_path_buf(),
                        pid,
                    })
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {}
                Err(e) => return Err(LockError::Io(e)),
            }
            match read_owner(path) {
                Some(owner) if is_alive(owner) => return Err(LockError::Held { pid: owner }),
                owner => {
                    log::warn!(
                        "removing stale lock {} (owner {:?} is gone)",
                        path.display(),
                        owner
                    );
                    // Move aside first so a lock published concurrently by a
                    // live process is not deleted by mistake.
                    let aside = path.with_extension(format!("stale.{pid}"));
                    match fs::rename(path, &aside) {
                        Ok(()) => {}
                        Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                        Err(e) => return Err(LockError::Io(e)),
                    }
                    let moved = read_owner(&aside);
                    if let Some(other) = moved.filter(|&p| is_alive(p)) {
                        let _ = fs::hard_link(&aside, path);
                        let _ = fs::remove_file(&aside);
                        return Err(LockError::Held { pid: other });
                    }
                    let _ = fs::remove_file(&aside);
                }
            }
        }
        match read_owner(path) {
            Some(owner) => Err(LockError::Held { pid: owner }),
            None => Err(LockError::Io(io::Error::new(
                io::ErrorKind::WouldBlock,
                "lock file keeps reappearing",
            ))),
        }
    }

}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        if read_owner(&self.path) == Some(self.pid) {
            let _ = fs::remove_file(&self.path);
        }
    }
}

fn read_owner(path: &Path) -> Option<u32> {
    fs::read_to_string(path).ok()?.trim().parse().ok()
}

/// Liveness probe by signal 0. EPERM still means the process exists.
pub fn is_alive(pid: u32) -> bool {
    let Ok(pid) = libc::pid_t::try_from(pid) else {
        return false;
    };
    if pid <= 0 {
        return false;
    }
    let rc = unsafe { libc::kill(pid, 0) };
    rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkspaceLock::acquire(dir.path()).unwrap();
        match WorkspaceLock::acquire(dir.path()) {
            Err(LockError::Held { pid }) => assert_eq!(pid, std::process::id()),
            other => panic!("expected Held, got {other:?}"),
        }
        drop(lock);
        assert!(!dir.path().join(LOCK_FILE).exists());
        WorkspaceLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        let mut child = std::process::Command::new("true").spawn().unwrap();
        let dead = child.id();
        child.wait().unwrap();
        fs::write(dir.path().join(LOCK_FILE), dead.to_string()).unwrap();
        let lock = WorkspaceLock::acquire(dir.path()).unwrap();
        assert_eq!(read_owner(&lock.path), Some(std::process::id()));
    }

    #[test]
    fn garbage_lock_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(LOCK_FILE), "not a pid").unwrap();
        let _lock = WorkspaceLock::acquire(dir.path()).unwrap();
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn liveness_probe() {
        assert!(is_alive(std::process::id()));
        assert!(!is_alive(0));
        assert!(!is_alive(u32::MAX));
    }
}
