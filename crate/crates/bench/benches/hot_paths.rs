use std::hint::black_box;
use std::net::Ipv4Addr;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qosmark_bench::{add_request, daemon, mark_rules, populated_emulator, requirements, roomy_space};
use qosmark_core::nef::TransmitRequest;
use qosmark_core::{map_requirement, NodePath, ProfileTable, SimPacket};

fn allocate(c: &mut Criterion) {
    c.bench_function("fwmark/allocate_release_64", |b| {
        b.iter_batched(
            roomy_space,
            |mut space| {
                let marks: Vec<_> = (0..64).map(|_| space.allocate().unwrap()).collect();
                for m in marks {
                    space.release(m).unwrap();
                }
                space
            },
            criterion::BatchSize::SmallInput,
        )
    });
}

fn mapping(c: &mut Criterion) {
    let table = ProfileTable::default();
    let reqs = requirements();
    c.bench_function("qos/map_requirement", |b| {
        b.iter(|| {
            for r in &reqs {
                let _ = black_box(map_requirement(black_box(r), &table));
            }
        })
    });
}

fn classify(c: &mut Criterion) {
    let mut group = c.benchmark_group("emulator/classify");
    for flows in [8u32, 32, 63] {
        let emu = populated_emulator(flows);
        group.bench_with_input(BenchmarkId::from_parameter(flows), &flows, |b, &n| {
            b.iter(|| emu.classify(black_box(n)))
        });
    }
    group.finish();
}

fn transmit(c: &mut Criterion) {
    let emu = populated_emulator(63);
    let mut t = 0u64;
    c.bench_function("emulator/transmit", |b| {
        b.iter(|| {
            t += 1000;
            emu.transmit(&TransmitRequest {
                send_time_ns: t,
                size_bytes: 256,
                flow: None,
                mark: 32,
            })
            .unwrap()
        })
    });
}

fn traverse(c: &mut Criterion) {
    let path = NodePath::new(mark_rules(64));
    let pkt = SimPacket::new(Ipv4Addr::new(10, 244, 1, 40), Ipv4Addr::new(10, 244, 2, 9), vec![0u8; 512]);
    c.bench_function("overlay/traverse", |b| b.iter(|| path.traverse(black_box(pkt.clone()))));
}

fn add_del(c: &mut Criterion) {
    let d = daemon();
    let mut i = 0usize;
    c.bench_function("daemon/add_del", |b| {
        b.iter(|| {
            i += 1;
            let req = add_request(i % 200);
            d.handle_add(&req).unwrap();
            d.handle_del(&req.container_id).unwrap()
        })
    });
}

criterion_group!(benches, allocate, mapping, classify, transmit, traverse, add_del);
criterion_main!(benches);
