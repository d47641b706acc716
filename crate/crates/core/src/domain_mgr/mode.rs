//! The mode check placed at call-gate entries. A tiny decoder runs the same
//! bytes in 64-bit and compatibility mode; in compatibility mode the REX.W
//! prefixes decode as `dec eax`, which clears the bit the check tests.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CpuMode {
    Long64,
    Compat32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MiniCpu {
    pub rax: u64,
    pub cf: bool,
    pub mode: CpuMode,
}

impl MiniCpu {
    pub fn new(rax: u64, mode: CpuMode) -> Self {
        MiniCpu {
            rax,
            cf: false,
            mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModeCheck {
    Pass,
    InvalidOpcodeTrap,
}

/// shl rax,1; inc rax; bt eax,0; jc +2; ud2; shr rax,1
pub const MODE_CHECK_CODE: [u8; 17] = [
    0x48, 0xd1, 0xe0, // shl rax, 1
    0x48, 0xff, 0xc0, // inc rax
    0x0f, 0xba, 0xe0, 0x00, // bt eax, 0
    0x72, 0x02, // jc +2
    0x0f, 0x0b, // ud2
    0x48, 0xd1, 0xe8, // shr rax, 1
];

const LOW32: u64 = 0xffff_ffff;

fn read(cpu: &MiniCpu, wide: bool) -> u64 {
    if wide {
        cpu.rax
    } else {
        cpu.rax & LOW32
    }
}

fn write(cpu: &mut MiniCpu, wide: bool, v: u64) {
    cpu.rax = match (wide, cpu.mode) {
        (true, _) => v,
        // 32-bit results zero-extend in 64-bit mode.
        (false, CpuMode::Long64) => v & LOW32,
        (false, CpuMode::Compat32) => (cpu.rax & !LOW32) | (v & LOW32),
    };
}

fn width_bits(wide: bool) -> u32 {
    if wide {
        64
    } else {
        32
    }
}

fn mask(wide: bool) -> u64 {
    if wide {
        u64::MAX
    } else {
        LOW32
    }
}

/// Runs `code` (which may only use the handful of encodings the check needs).
pub fn run(mut cpu: MiniCpu, code: &[u8]) -> (MiniCpu, ModeCheck) {
    let mut pc = 0usize;
    let mut wide = false;
    while pc < code.len() {
        let op = code[pc];
        match (cpu.mode, op) {
            (CpuMode::Long64, 0x48) => {
                wide = true;
                pc += 1;
                continue;
            }
            (CpuMode::Compat32, 0x48) => {
                // dec eax; CF is untouched.
                let v = read(&cpu, false).wrapping_sub(1) & LOW32;
                write(&mut cpu, false, v);
                pc += 1;
            }
            (_, 0xd1) => {
                let v = read(&cpu, wide);
                match code[pc + 1] {
                    0xe0 => {
                        cpu.cf = v >> (width_bits(wide) - 1) & 1 == 1;
                        write(&mut cpu, wide, (v << 1) & mask(wide));
                    }
                    0xe8 => {
                        cpu.cf = v & 1 == 1;
                        write(&mut cpu, wide, v >> 1);
                    }
                    other => panic!("unsupported modrm {other:#x}"),
                }
                pc += 2;
            }
            (_, 0xff) => {
                assert_eq!(code[pc + 1], 0xc0, "only inc eax/rax is modeled");
                let v = read(&cpu, wide).wrapping_add(1) & mask(wide);
                write(&mut cpu, wide, v);
                pc += 2;
            }
            (_, 0x0f) => match code[pc + 1] {
                0xba => {
                    assert_eq!(code[pc + 2], 0xe0, "only bt eax, imm8 is modeled");
                    let bit = code[pc + 3] as u32 % width_bits(wide);
                    cpu.cf = read(&cpu, wide) >> bit & 1 == 1;
                    pc += 4;
                }
                0x0b => return (cpu, ModeCheck::InvalidOpcodeTrap),
                other => panic!("unsupported opcode 0f {other:#x}"),
            },
            (_, 0x72) => {
                let rel = code[pc + 1] as i8 as isize;
                pc += 2;
                if cpu.cf {
                    pc = (pc as isize + rel) as usize;
                }
            }
            (_, other) => panic!("unsupported opcode {other:#x}"),
        }
        wide = false;
    }
    (cpu, ModeCheck::Pass)
}

/// Runs the mode check on `cpu`.
pub fn mode_check(cpu: MiniCpu) -> (MiniCpu, ModeCheck) {
    run(cpu, &MODE_CHECK_CODE)
}
