use std::path::Path;

use latefuse::pde::{generate_dataset, write_dataset, GenerateConfig, Split};

use crate::config::{record, GenRun};
use crate::error::Result;

/// Seed of one split; distinct runs never share a split seed.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::InDomainTest => 1,
        Split::OutDomainTest => 2,
    };
    seed.wrapping_mul(3).wrapping_add(offset)
}

pub fn run(run: &GenRun, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    for split in Split::ALL {
        let mut cfg = GenerateConfig::preset(run.equation, split, run.preset, split_seed(run.seed, split));
        cfg.count = match split {
            Split::Train => run.train_count,
            Split::InDomainTest => run.in_domain_count,
            Split::OutDomainTest => run.out_domain_count,
        };
        cfg.initial.num_waves = run.num_waves;
        cfg.initial.max_wavenumber = run.max_wavenumber;
        let ds = generate_dataset(&cfg)?;
        let manifest = write_dataset(&ds, &out.join(split.name()))?;
        eprintln!(
            "{}: {} trajectories ({} rejected draws) -> {}",
            split,
            manifest.count,
            manifest.rejected_draws,
            out.join(split.name()).display()
        );
    }
    record(out, "gen", run)
}
