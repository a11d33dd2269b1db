//! Host physical memory and per-sandbox extended page tables.
//!
//! Each sandbox translates guest-physical addresses (GPAs) to
//! host-physical addresses (HPAs) through a private four-level table
//! with 4KB pages and R/W/X permissions. Failed translations are
//! values, not errors: the caller turns them into traps. Tables are
//! mutable only through a monitor capability token.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as FmtWrite;

use sha2::{Digest, Sha256};

use crate::sandbox::SandboxId;
use crate::{Error, Result};

pub const PAGE_SIZE: u64 = 4096;
const ENTRIES: usize = 512;
const GPA_BITS: u32 = 48;

/// Guest-physical address.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Gpa(pub u64);

/// Host-physical address.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hpa(pub u64);

impl fmt::Debug for Gpa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gpa:{:#x}", self.0)
    }
}

impl fmt::Debug for Hpa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hpa:{:#x}", self.0)
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

impl AccessKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessKind::Read => "read",
            AccessKind::Write => "write",
            AccessKind::Execute => "execute",
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct Permissions {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Permissions {
    pub const RWX: Permissions = Permissions {
        read: true,
        write: true,
        execute: true,
    };
    pub const RW: Permissions = Permissions {
        read: true,
        write: true,
        execute: false,
    };
    pub const RO: Permissions = Permissions {
        read: true,
        write: false,
        execute: false,
    };

    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Execute => self.execute,
        }
    }

    fn any(self) -> bool {
        self.read || self.write || self.execute
    }

    fn letters(self) -> String {
        let mut s = String::new();
        s.push(if self.read { 'r' } else { '-' });
        s.push(if self.write { 'w' } else { '-' });
        s.push(if self.execute { 'x' } else { '-' });
        s
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum ViolationReason {
    Unmapped,
    PermissionDenied,
}

impl ViolationReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationReason::Unmapped => "unmapped",
            ViolationReason::PermissionDenied => "permission-denied",
        }
    }
}

/// A failed translation. Produced by walks and accesses; the sandbox
/// layer turns it into a trap to the local monitor.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct EptViolation {
    pub sandbox: SandboxId,
    pub gpa: Gpa,
    pub access: AccessKind,
    pub reason: ViolationReason,
}

/// Splits a GPA into the four table indices plus page offset.
pub fn ept_index(gpa: Gpa) -> Result<(usize, usize, usize, usize, u64)> {
    if gpa.0 >> GPA_BITS != 0 {
        return Err(Error::GpaRange { gpa: gpa.0 });
    }
    let idx = |shift: u32| ((gpa.0 >> shift) & 0x1FF) as usize;
    Ok((idx(39), idx(30), idx(21), idx(12), gpa.0 & 0xFFF))
}

/// Capability for mutating one sandbox's table. Only the monitor layer
/// can mint these; holding one for sandbox A grants nothing on B.
#[derive(Clone, Debug)]
pub struct MonitorToken {
    sandbox: SandboxId,
}

impl MonitorToken {
    pub(crate) fn mint(sandbox: SandboxId) -> MonitorToken {
        MonitorToken { sandbox }
    }

    pub fn sandbox(&self) -> SandboxId {
        self.sandbox
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
struct Leaf {
    hpa_frame: u64,
    perms: Permissions,
}

struct Level<T> {
    slots: Box<[Option<T>; ENTRIES]>,
}

impl<T> Level<T> {
    fn new() -> Level<T> {
        Level {
            slots: Box::new(std::array::from_fn(|_| None)),
        }
    }
}

type Pt = Level<Leaf>;
type Pd = Level<Box<Pt>>;
type Pdpt = Level<Box<Pd>>;

/// One sandbox's GPA→HPA table: PML4 → PDPT → PD → PT, intermediate
/// levels allocated on demand, mappings only at the 4KB leaf level.
pub struct EptTable {
    owner: SandboxId,
    host_bytes: u64,
    root: Level<Box<Pdpt>>,
}

impl EptTable {
    pub fn new(owner: SandboxId, host_bytes: u64) -> EptTable {
        EptTable {
            owner,
            host_bytes,
            root: Level::new(),
        }
    }

    /// Creates an empty table plus the one credential that can mutate
    /// it. Building a sandbox's table is the monitor-layer act that
    /// yields its token; external drivers go through this so a token
    /// for one table never appears without that table existing.
    pub fn new_with_token(owner: SandboxId, host_bytes: u64) -> (EptTable, MonitorToken) {
        (EptTable::new(owner, host_bytes), MonitorToken::mint(owner))
    }

    pub fn owner(&self) -> SandboxId {
        self.owner
    }

    fn check_token(&self, token: &MonitorToken) -> Result<()> {
        if token.sandbox != self.owner {
            return Err(Error::Capability);
        }
        Ok(())
    }

    fn check_aligned(addr: u64) -> Result<()> {
        if !addr.is_multiple_of(PAGE_SIZE) {
            return Err(Error::Misaligned { addr });
        }
        Ok(())
    }

    fn leaf_mut(&mut self, gpa: Gpa) -> Result<&mut Option<Leaf>> {
        let (i4, i3, i2, i1, _) = ept_index(gpa)?;
        let pdpt = self.root.slots[i4].get_or_insert_with(|| Box::new(Level::new()));
        let pd = pdpt.slots[i3].get_or_insert_with(|| Box::new(Level::new()));
        let pt = pd.slots[i2].get_or_insert_with(|| Box::new(Level::new()));
        Ok(&mut pt.slots[i1])
    }

    /// Installs `n_pages` consecutive 4KB mappings. Remap overwrites.
    pub fn map(
        &mut self,
        token: &MonitorToken,
        gpa: Gpa,
        hpa: Hpa,
        perms: Permissions,
        n_pages: u64,
    ) -> Result<()> {
        self.check_token(token)?;
        Self::check_aligned(gpa.0)?;
        Self::check_aligned(hpa.0)?;
        if !perms.any() {
            return Err(Error::Config(
                "all-false permissions are not mappable; unmap instead".into(),
            ));
        }
        let len = n_pages.checked_mul(PAGE_SIZE).ok_or(Error::TimeOverflow)?;
        if hpa
            .0
            .checked_add(len)
            .is_none_or(|end| end > self.host_bytes)
        {
            return Err(Error::HpaRange {
                hpa: hpa.0,
                len,
                host: self.host_bytes,
            });
        }
        for p in 0..n_pages {
            let leaf = self.leaf_mut(Gpa(gpa.0 + p * PAGE_SIZE))?;
            *leaf = Some(Leaf {
                hpa_frame: hpa.0 + p * PAGE_SIZE,
                perms,
            });
        }
        Ok(())
    }

    pub fn unmap(&mut self, token: &MonitorToken, gpa: Gpa, n_pages: u64) -> Result<()> {
        self.check_token(token)?;
        Self::check_aligned(gpa.0)?;
        for p in 0..n_pages {
            if let Ok(leaf) = self.leaf_mut(Gpa(gpa.0 + p * PAGE_SIZE)) {
                *leaf = None;
            }
        }
        Ok(())
    }

    pub fn set_perms(
        &mut self,
        token: &MonitorToken,
        gpa: Gpa,
        perms: Permissions,
        n_pages: u64,
    ) -> Result<()> {
        self.check_token(token)?;
        Self::check_aligned(gpa.0)?;
        if !perms.any() {
            return Err(Error::Config(
                "all-false permissions are not mappable; unmap instead".into(),
            ));
        }
        for p in 0..n_pages {
            let leaf = self.leaf_mut(Gpa(gpa.0 + p * PAGE_SIZE))?;
            match leaf {
                Some(l) => l.perms = perms,
                None => {
                    return Err(Error::State(format!(
                        "set_perms on unmapped gpa {:#x}",
                        gpa.0 + p * PAGE_SIZE
                    )))
                }
            }
        }
        Ok(())
    }

    fn lookup(&self, gpa: Gpa) -> Option<Leaf> {
        let (i4, i3, i2, i1, _) = ept_index(gpa).ok()?;
        let pdpt = self.root.slots[i4].as_ref()?;
        let pd = pdpt.slots[i3].as_ref()?;
        let pt = pd.slots[i2].as_ref()?;
        pt.slots[i1]
    }

    /// Hardware-style walk. Out-of-range GPAs fault as unmapped.
    pub fn walk(&self, gpa: Gpa, kind: AccessKind) -> std::result::Result<Hpa, EptViolation> {
        let violation = |reason| EptViolation {
            sandbox: self.owner,
            gpa,
            access: kind,
            reason,
        };
        let leaf = self
            .lookup(gpa)
            .ok_or_else(|| violation(ViolationReason::Unmapped))?;
        if !leaf.perms.allows(kind) {
            return Err(violation(ViolationReason::PermissionDenied));
        }
        Ok(Hpa(leaf.hpa_frame | (gpa.0 & 0xFFF)))
    }

    /// All leaf mappings as (gpa_page, hpa_frame, perms), ascending by
    /// GPA. Drives the layout report and isolation checks.
    pub fn mappings(&self) -> Vec<(u64, u64, Permissions)> {
        let mut out = Vec::new();
        for (i4, pdpt) in self.root.slots.iter().enumerate() {
            let Some(pdpt) = pdpt else { continue };
            for (i3, pd) in pdpt.slots.iter().enumerate() {
                let Some(pd) = pd else { continue };
                for (i2, pt) in pd.slots.iter().enumerate() {
                    let Some(pt) = pt else { continue };
                    for (i1, leaf) in pt.slots.iter().enumerate() {
                        let Some(leaf) = leaf else { continue };
                        let gpa = ((i4 as u64) << 39)
                            | ((i3 as u64) << 30)
                            | ((i2 as u64) << 21)
                            | ((i1 as u64) << 12);
                        out.push((gpa, leaf.hpa_frame, leaf.perms));
                    }
                }
            }
        }
        out
    }
}

/// Sparse host byte store: pages materialize on first write, reads of
/// untouched pages see zeros. Bounded by the configured host size.
pub struct HostStore {
    host_bytes: u64,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
}

impl HostStore {
    pub fn new(host_bytes: u64) -> HostStore {
        HostStore {
            host_bytes,
            pages: BTreeMap::new(),
        }
    }

    pub fn host_bytes(&self) -> u64 {
        self.host_bytes
    }

    fn check_range(&self, hpa: Hpa, len: u64) -> Result<()> {
        if hpa
            .0
            .checked_add(len)
            .is_none_or(|end| end > self.host_bytes)
        {
            return Err(Error::HpaRange {
                hpa: hpa.0,
                len,
                host: self.host_bytes,
            });
        }
        Ok(())
    }

    pub fn read(&self, hpa: Hpa, len: usize) -> Result<Vec<u8>> {
        self.check_range(hpa, len as u64)?;
        let mut out = vec![0u8; len];
        let mut done = 0usize;
        while done < len {
            let addr = hpa.0 + done as u64;
            let frame = addr / PAGE_SIZE * PAGE_SIZE;
            let off = (addr % PAGE_SIZE) as usize;
            let take = (len - done).min(PAGE_SIZE as usize - off);
            if let Some(page) = self.pages.get(&frame) {
                out[done..done + take].copy_from_slice(&page[off..off + take]);
            }
            done += take;
        }
        Ok(out)
    }

    pub fn write(&mut self, hpa: Hpa, data: &[u8]) -> Result<()> {
        self.check_range(hpa, data.len() as u64)?;
        let mut done = 0usize;
        while done < data.len() {
            let addr = hpa.0 + done as u64;
            let frame = addr / PAGE_SIZE * PAGE_SIZE;
            let off = (addr % PAGE_SIZE) as usize;
            let take = (data.len() - done).min(PAGE_SIZE as usize - off);
            let page = self
                .pages
                .entry(frame)
                .or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
            page[off..off + take].copy_from_slice(&data[done..done + take]);
            done += take;
        }
        Ok(())
    }

    /// Digest over the logical contents of a range. Untouched pages
    /// hash as zeros, so materializing a page without changing bytes
    /// does not change the digest. Used for isolation checks around
    /// fault injection without copying whole kernel images.
    pub fn logical_digest(&self, hpa: Hpa, len: u64) -> Result<[u8; 32]> {
        self.check_range(hpa, len)?;
        const ZEROS: [u8; PAGE_SIZE as usize] = [0u8; PAGE_SIZE as usize];
        let mut h = Sha256::new();
        h.update(len.to_le_bytes());
        let mut done = 0u64;
        while done < len {
            let addr = hpa.0 + done;
            let frame = addr / PAGE_SIZE * PAGE_SIZE;
            let off = (addr % PAGE_SIZE) as usize;
            let take = ((len - done) as usize).min(PAGE_SIZE as usize - off);
            match self.pages.get(&frame) {
                Some(page) => h.update(&page[off..off + take]),
                None => h.update(&ZEROS[..take]),
            }
            done += take as u64;
        }
        Ok(h.finalize().into())
    }
}

/// Region sizes for [`build_layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutSizes {
    pub host_bytes: u64,
    pub bios_bytes: u64,
    pub kernel_bytes: u64,
    pub shared_bytes: u64,
    pub ept_data_bytes: u64,
}

impl Default for LayoutSizes {
    fn default() -> Self {
        LayoutSizes {
            host_bytes: 1 << 30,
            bios_bytes: 1 << 20,
            kernel_bytes: 16 << 20,
            shared_bytes: 4 << 20,
            ept_data_bytes: 1 << 20,
        }
    }
}

/// Where everything landed: guest-visible region bases plus the host
/// carve-up backing them.
#[derive(Clone, Debug)]
pub struct MemoryLayout {
    pub host_bytes: u64,
    pub bios_bytes: u64,
    /// Every sandbox sees its kernel at this GPA.
    pub kernel_base_gpa: Gpa,
    pub kernel_bytes: u64,
    /// Private host base of each sandbox's kernel image.
    pub kernel_host_base: Vec<Hpa>,
    /// Identity-mapped communication region at the top of host memory.
    pub shared_base: Gpa,
    pub shared_bytes: u64,
    /// Per-sandbox table storage; host-only, present in no table.
    pub ept_data_host: Vec<(Hpa, u64)>,
}

impl MemoryLayout {
    pub fn shared_end(&self) -> Gpa {
        Gpa(self.shared_base.0 + self.shared_bytes)
    }

    pub fn in_shared(&self, gpa: Gpa) -> bool {
        gpa >= self.shared_base && gpa < self.shared_end()
    }
}

/// All tables plus the backing store, built per the boot-time layout.
pub struct MemorySystem {
    pub layout: MemoryLayout,
    tables: Vec<EptTable>,
    host: HostStore,
}

/// Carves host memory for `n` sandboxes and installs the boot mappings:
/// BIOS read-only everywhere, one private RWX kernel region per
/// sandbox, the shared communication region writable by all, and table
/// storage visible to none.
pub fn build_layout(n_sandboxes: usize, sizes: &LayoutSizes) -> Result<MemorySystem> {
    if n_sandboxes == 0 {
        return Err(Error::Config("need at least one sandbox".into()));
    }
    for (name, v) in [
        ("bios_bytes", sizes.bios_bytes),
        ("kernel_bytes", sizes.kernel_bytes),
        ("shared_bytes", sizes.shared_bytes),
        ("ept_data_bytes", sizes.ept_data_bytes),
    ] {
        if v == 0 || v % PAGE_SIZE != 0 {
            return Err(Error::Config(format!(
                "{name} must be a positive multiple of {PAGE_SIZE}"
            )));
        }
    }
    let n = n_sandboxes as u64;
    let fixed = sizes.bios_bytes + n * (sizes.kernel_bytes + sizes.ept_data_bytes);
    if fixed + sizes.shared_bytes > sizes.host_bytes {
        return Err(Error::HostExhausted);
    }

    let kernel_host_base: Vec<Hpa> = (0..n)
        .map(|i| Hpa(sizes.bios_bytes + i * sizes.kernel_bytes))
        .collect();
    let ept_data_start = sizes.bios_bytes + n * sizes.kernel_bytes;
    let ept_data_host: Vec<(Hpa, u64)> = (0..n)
        .map(|i| {
            (
                Hpa(ept_data_start + i * sizes.ept_data_bytes),
                sizes.ept_data_bytes,
            )
        })
        .collect();
    let shared_base = Gpa(sizes.host_bytes - sizes.shared_bytes);

    let layout = MemoryLayout {
        host_bytes: sizes.host_bytes,
        bios_bytes: sizes.bios_bytes,
        kernel_base_gpa: Gpa(sizes.bios_bytes),
        kernel_bytes: sizes.kernel_bytes,
        kernel_host_base: kernel_host_base.clone(),
        shared_base,
        shared_bytes: sizes.shared_bytes,
        ept_data_host,
    };

    let mut tables = Vec::with_capacity(n_sandboxes);
    for (i, &kernel_host) in kernel_host_base.iter().enumerate() {
        let sb = SandboxId(i as u32);
        let token = MonitorToken::mint(sb);
        let mut t = EptTable::new(sb, sizes.host_bytes);
        t.map(
            &token,
            Gpa(0),
            Hpa(0),
            Permissions::RO,
            sizes.bios_bytes / PAGE_SIZE,
        )?;
        t.map(
            &token,
            layout.kernel_base_gpa,
            kernel_host,
            Permissions::RWX,
            sizes.kernel_bytes / PAGE_SIZE,
        )?;
        t.map(
            &token,
            shared_base,
            Hpa(shared_base.0),
            Permissions::RW,
            sizes.shared_bytes / PAGE_SIZE,
        )?;
        tables.push(t);
    }

    Ok(MemorySystem {
        layout,
        tables,
        host: HostStore::new(sizes.host_bytes),
    })
}

impl MemorySystem {
    pub fn table(&self, sandbox: SandboxId) -> &EptTable {
        &self.tables[sandbox.0 as usize]
    }

    pub fn table_mut(&mut self, sandbox: SandboxId) -> &mut EptTable {
        &mut self.tables[sandbox.0 as usize]
    }

    pub fn host(&self) -> &HostStore {
        &self.host
    }

    pub fn host_mut(&mut self) -> &mut HostStore {
        &mut self.host
    }

    pub fn sandbox_count(&self) -> usize {
        self.tables.len()
    }

    /// Translates every page the access touches before moving a byte:
    /// a violation anywhere transfers nothing.
    fn translate_span(
        &self,
        sandbox: SandboxId,
        gpa: Gpa,
        kind: AccessKind,
        len: usize,
    ) -> std::result::Result<Vec<(Hpa, usize)>, EptViolation> {
        let table = &self.tables[sandbox.0 as usize];
        let mut spans = Vec::new();
        let mut done = 0usize;
        while done < len {
            let addr = Gpa(gpa.0 + done as u64);
            let off = (addr.0 % PAGE_SIZE) as usize;
            let take = (len - done).min(PAGE_SIZE as usize - off);
            let hpa = table.walk(addr, kind)?;
            spans.push((hpa, take));
            done += take;
        }
        Ok(spans)
    }

    pub fn guest_read(
        &self,
        sandbox: SandboxId,
        gpa: Gpa,
        len: usize,
    ) -> std::result::Result<Vec<u8>, EptViolation> {
        let spans = self.translate_span(sandbox, gpa, AccessKind::Read, len)?;
        let mut out = Vec::with_capacity(len);
        for (hpa, take) in spans {
            out.extend_from_slice(&self.host.read(hpa, take).expect("walked hpa in range"));
        }
        Ok(out)
    }

    pub fn guest_write(
        &mut self,
        sandbox: SandboxId,
        gpa: Gpa,
        data: &[u8],
    ) -> std::result::Result<(), EptViolation> {
        let spans = self.translate_span(sandbox, gpa, AccessKind::Write, data.len())?;
        let mut done = 0usize;
        for (hpa, take) in spans {
            self.host
                .write(hpa, &data[done..done + take])
                .expect("walked hpa in range");
            done += take;
        }
        Ok(())
    }

    /// Deterministic text report of every sandbox's view, coalescing
    /// contiguous same-permission runs.
    pub fn layout_report(&self) -> String {
        let mut out = String::new();
        writeln!(out, "host memory: {} bytes", self.layout.host_bytes).unwrap();
        for (i, (hpa, len)) in self.layout.ept_data_host.iter().enumerate() {
            writeln!(
                out,
                "table storage sandbox{}: host [{:#x}, {:#x}) unmapped everywhere",
                i,
                hpa.0,
                hpa.0 + len
            )
            .unwrap();
        }
        for t in &self.tables {
            writeln!(out, "sandbox{}:", t.owner().0).unwrap();
            let maps = t.mappings();
            let mut run: Option<(u64, u64, u64, Permissions)> = None;
            let flush = |run: &mut Option<(u64, u64, u64, Permissions)>, out: &mut String| {
                if let Some((g0, h0, pages, p)) = run.take() {
                    writeln!(
                        out,
                        "  gpa [{:#x}, {:#x}) -> host [{:#x}, {:#x}) {}",
                        g0,
                        g0 + pages * PAGE_SIZE,
                        h0,
                        h0 + pages * PAGE_SIZE,
                        p.letters()
                    )
                    .unwrap();
                }
            };
            for (g, h, p) in maps {
                match &mut run {
                    Some((g0, h0, pages, rp))
                        if *rp == p
                            && g == *g0 + *pages * PAGE_SIZE
                            && h == *h0 + *pages * PAGE_SIZE =>
                    {
                        *pages += 1;
                    }
                    _ => {
                        flush(&mut run, &mut out);
                        run = Some((g, h, 1, p));
                    }
                }
            }
            flush(&mut run, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sb(n: u32) -> SandboxId {
        SandboxId(n)
    }

    #[test]
    fn index_splitting() {
        assert_eq!(ept_index(Gpa(0)).unwrap(), (0, 0, 0, 0, 0));
        assert_eq!(ept_index(Gpa(0x0040_3025)).unwrap(), (0, 0, 2, 3, 0x25));
        assert_eq!(
            ept_index(Gpa(0xFFFF_FFFF)).unwrap(),
            (0, 3, 511, 511, 0xFFF)
        );
        assert!(matches!(
            ept_index(Gpa(1 << 48)),
            Err(Error::GpaRange { .. })
        ));
    }

    #[test]
    fn identity_map_walk() {
        let token = MonitorToken::mint(sb(0));
        let mut t = EptTable::new(sb(0), 1 << 30);
        t.map(&token, Gpa(0x1000), Hpa(0x1000), Permissions::RWX, 1)
            .unwrap();
        assert_eq!(t.walk(Gpa(0x1234), AccessKind::Read).unwrap(), Hpa(0x1234));
    }

    #[test]
    fn offset_preserved_across_remap() {
        let token = MonitorToken::mint(sb(0));
        let mut t = EptTable::new(sb(0), 1 << 30);
        t.map(&token, Gpa(0), Hpa(0x20_0000), Permissions::RW, 1)
            .unwrap();
        assert_eq!(
            t.walk(Gpa(0x0FFF), AccessKind::Read).unwrap(),
            Hpa(0x20_0FFF)
        );
    }

    #[test]
    fn wrong_token_rejected() {
        let token = MonitorToken::mint(sb(1));
        let mut t = EptTable::new(sb(0), 1 << 30);
        let err = t
            .map(&token, Gpa(0), Hpa(0), Permissions::RWX, 1)
            .unwrap_err();
        assert!(matches!(err, Error::Capability));
    }

    #[test]
    fn unmapped_and_permission_violations() {
        let token = MonitorToken::mint(sb(0));
        let mut t = EptTable::new(sb(0), 1 << 30);
        let v = t.walk(Gpa(0x5000), AccessKind::Read).unwrap_err();
        assert_eq!(v.reason, ViolationReason::Unmapped);

        t.map(&token, Gpa(0x5000), Hpa(0x5000), Permissions::RO, 1)
            .unwrap();
        let v = t.walk(Gpa(0x5000), AccessKind::Write).unwrap_err();
        assert_eq!(v.reason, ViolationReason::PermissionDenied);
        assert_eq!(v.access, AccessKind::Write);
    }

    #[test]
    fn thousand_unprivileged_mutations_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let owner_token = MonitorToken::mint(sb(0));
        let mut t = EptTable::new(sb(0), 1 << 30);
        t.map(&owner_token, Gpa(0), Hpa(0), Permissions::RWX, 64)
            .unwrap();
        let before = t.mappings();
        for _ in 0..1000 {
            let intruder = MonitorToken::mint(sb(rng.gen_range(1..1000)));
            let gpa = Gpa(u64::from(rng.gen_range(0u32..128)) * PAGE_SIZE);
            let r = match rng.gen_range(0..3) {
                0 => t.map(&intruder, gpa, Hpa(0x1000), Permissions::RW, 1),
                1 => t.unmap(&intruder, gpa, 1),
                _ => t.set_perms(&intruder, gpa, Permissions::RO, 1),
            };
            assert!(matches!(r, Err(Error::Capability)));
        }
        assert_eq!(t.mappings(), before, "table must be untouched");
    }

    #[test]
    fn random_ops_agree_with_flat_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let token = MonitorToken::mint(sb(0));
        let host = 1u64 << 30;
        let mut t = EptTable::new(sb(0), host);
        let mut oracle: BTreeMap<u64, (u64, Permissions)> = BTreeMap::new();
        let pages = 4096u64;
        for _ in 0..10_000 {
            let gpa_page = rng.gen_range(0..pages) * PAGE_SIZE;
            match rng.gen_range(0..4) {
                0 => {
                    let hpa = rng.gen_range(0..(host / PAGE_SIZE)) * PAGE_SIZE;
                    let perms = Permissions {
                        read: rng.gen_bool(0.8),
                        write: rng.gen_bool(0.5),
                        execute: rng.gen_bool(0.3),
                    };
                    if perms.any() {
                        t.map(&token, Gpa(gpa_page), Hpa(hpa), perms, 1).unwrap();
                        oracle.insert(gpa_page, (hpa, perms));
                    }
                }
                1 => {
                    t.unmap(&token, Gpa(gpa_page), 1).unwrap();
                    oracle.remove(&gpa_page);
                }
                2 => {
                    let perms = Permissions::RO;
                    let expect_mapped = oracle.contains_key(&gpa_page);
                    let r = t.set_perms(&token, Gpa(gpa_page), perms, 1);
                    assert_eq!(r.is_ok(), expect_mapped);
                    if expect_mapped {
                        oracle.get_mut(&gpa_page).unwrap().1 = perms;
                    }
                }
                _ => {
                    let off = rng.gen_range(0..PAGE_SIZE);
                    let kind = match rng.gen_range(0..3) {
                        0 => AccessKind::Read,
                        1 => AccessKind::Write,
                        _ => AccessKind::Execute,
                    };
                    let got = t.walk(Gpa(gpa_page + off), kind);
                    let want = match oracle.get(&gpa_page) {
                        Some((hpa, perms)) if perms.allows(kind) => Ok(Hpa(hpa + off)),
                        Some(_) => Err(ViolationReason::PermissionDenied),
                        None => Err(ViolationReason::Unmapped),
                    };
                    assert_eq!(got.map_err(|v| v.reason), want);
                }
            }
        }
    }

    #[test]
    fn access_is_all_or_nothing() {
        let mut sys = build_layout(1, &LayoutSizes::default()).unwrap();
        let base = sys.layout.kernel_base_gpa;
        // last mapped kernel page; its successor GPA is unmapped
        let last_page = Gpa(base.0 + sys.layout.kernel_bytes - PAGE_SIZE);
        // 4100-byte write starting 4090 bytes into the page: spills 4094
        // bytes past the mapping, so not even the first 6 may land
        let from = Gpa(last_page.0 + 4090);
        let snapshot = sys.guest_read(SandboxId(0), last_page, 4096).unwrap();
        let v = sys
            .guest_write(SandboxId(0), from, &[0xAB; 4100])
            .unwrap_err();
        assert_eq!(v.reason, ViolationReason::Unmapped);
        let after = sys.guest_read(SandboxId(0), last_page, 4096).unwrap();
        assert_eq!(snapshot, after, "first page must be untouched");
    }

    #[test]
    fn write_then_read_roundtrip() {
        let mut sys = build_layout(2, &LayoutSizes::default()).unwrap();
        let base = sys.layout.kernel_base_gpa;
        sys.guest_write(SandboxId(0), base, b"hello km").unwrap();
        assert_eq!(
            sys.guest_read(SandboxId(0), base, 8).unwrap(),
            b"hello km".to_vec()
        );
        // same GPA in sandbox 1 is a different host range: still zero
        assert_eq!(sys.guest_read(SandboxId(1), base, 8).unwrap(), vec![0; 8]);
    }

    #[test]
    fn cross_sandbox_kernel_is_invisible() {
        let mut sys = build_layout(2, &LayoutSizes::default()).unwrap();
        // sandbox 1's kernel host range is not a GPA in sandbox 0's
        // table unless it aliases another region; walk the raw address
        let alien = Gpa(sys.layout.kernel_host_base[1].0);
        let v = sys
            .guest_write(SandboxId(0), alien, &[1, 2, 3])
            .unwrap_err();
        assert_eq!(v.reason, ViolationReason::Unmapped);
    }

    #[test]
    fn bios_is_read_only() {
        let mut sys = build_layout(1, &LayoutSizes::default()).unwrap();
        let v = sys.guest_write(SandboxId(0), Gpa(0x100), &[1]).unwrap_err();
        assert_eq!(v.reason, ViolationReason::PermissionDenied);
        assert!(sys.guest_read(SandboxId(0), Gpa(0x100), 4).is_ok());
    }

    #[test]
    fn shared_region_visible_to_all() {
        let mut sys = build_layout(3, &LayoutSizes::default()).unwrap();
        let base = sys.layout.shared_base;
        sys.guest_write(SandboxId(0), base, b"mailbox").unwrap();
        for i in 0..3 {
            assert_eq!(
                sys.guest_read(SandboxId(i), base, 7).unwrap(),
                b"mailbox".to_vec()
            );
        }
    }

    #[test]
    fn layout_single_and_quad() {
        let sys = build_layout(1, &LayoutSizes::default()).unwrap();
        assert_eq!(sys.layout.kernel_host_base.len(), 1);

        let sys = build_layout(4, &LayoutSizes::default()).unwrap();
        let k = sys.layout.kernel_bytes;
        let ranges: Vec<(u64, u64)> = sys
            .layout
            .kernel_host_base
            .iter()
            .map(|h| (h.0, h.0 + k))
            .collect();
        for i in 0..ranges.len() {
            for j in 0..ranges.len() {
                if i != j {
                    let (a0, a1) = ranges[i];
                    let (b0, b1) = ranges[j];
                    assert!(a1 <= b0 || b1 <= a0, "kernel ranges overlap");
                }
            }
        }
        // table storage is reachable from no sandbox
        for (hpa, len) in &sys.layout.ept_data_host {
            for i in 0..4 {
                let v = sys
                    .table(SandboxId(i))
                    .walk(Gpa(hpa.0), AccessKind::Read)
                    .unwrap_err();
                assert_eq!(v.reason, ViolationReason::Unmapped);
                let v = sys
                    .table(SandboxId(i))
                    .walk(Gpa(hpa.0 + len - 1), AccessKind::Read)
                    .unwrap_err();
                assert_eq!(v.reason, ViolationReason::Unmapped);
            }
        }
    }

    #[test]
    fn writable_intersection_is_only_shared() {
        let sys = build_layout(4, &LayoutSizes::default()).unwrap();
        let writable = |i: u32| -> Vec<u64> {
            sys.table(SandboxId(i))
                .mappings()
                .into_iter()
                .filter(|(_, _, p)| p.write)
                .map(|(_, h, _)| h)
                .collect()
        };
        for i in 0..4u32 {
            for j in (i + 1)..4 {
                let a: std::collections::BTreeSet<u64> = writable(i).into_iter().collect();
                for h in writable(j) {
                    if a.contains(&h) {
                        assert!(
                            h >= sys.layout.shared_base.0
                                && h < sys.layout.shared_base.0 + sys.layout.shared_bytes,
                            "writable overlap outside shared region at {h:#x}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn layout_report_is_deterministic() {
        let a = build_layout(2, &LayoutSizes::default())
            .unwrap()
            .layout_report();
        let b = build_layout(2, &LayoutSizes::default())
            .unwrap()
            .layout_report();
        assert_eq!(a, b);
        assert!(a.contains("sandbox0:"));
        assert!(a.contains("r-x") || a.contains("rwx"));
    }

    proptest! {
        #[test]
        fn walk_never_escapes_mapped_frames(pages in proptest::collection::vec((0u64..256, 0u64..1024), 1..40), probe in 0u64..(256 * PAGE_SIZE)) {
            let token = MonitorToken::mint(SandboxId(0));
            let mut t = EptTable::new(SandboxId(0), 1 << 30);
            let mut frames = std::collections::BTreeSet::new();
            for (gp, hp) in pages {
                t.map(&token, Gpa(gp * PAGE_SIZE), Hpa(hp * PAGE_SIZE), Permissions::RW, 1).unwrap();
                frames.insert(hp * PAGE_SIZE);
            }
            if let Ok(hpa) = t.walk(Gpa(probe), AccessKind::Read) {
                prop_assert!(frames.contains(&(hpa.0 / PAGE_SIZE * PAGE_SIZE)));
                prop_assert_eq!(hpa.0 % PAGE_SIZE, probe % PAGE_SIZE);
            }
        }
    }
}
