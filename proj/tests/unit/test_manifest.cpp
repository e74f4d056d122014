#include "histotype/io.hpp"
#include "histotype/manifest.hpp"
#include "histotype/rng.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <map>
#include <set>

using namespace histotype;
using testing_support::TempDir;

namespace {

std::vector<TileRecord> make_tiles(const std::string& wsi, std::size_t n) {
    std::vector<TileRecord> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({wsi, make_tile_id(wsi, static_cast<int>(i) * 512, 0), static_cast<int>(i) * 512, 0, 1.0});
    return out;
}

CohortManifest cohort(const std::vector<std::pair<std::string, std::size_t>>& patients_per_class,
                      std::size_t wsis_per_patient = 1) {
    CohortManifest m;
    for (const auto& [label, n] : patients_per_class)
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t w = 0; w < wsis_per_patient; ++w) {
                const auto patient = label + "-P" + std::to_string(p);
                m.records.push_back({patient + "-W" + std::to_string(w), patient, label, "x.png", 0.5});
            }
    return m;
}

}  // namespace

TEST(Manifest, LoadsOneWsiPerSubtype) {
    TempDir dir;
    io::write_file(dir / "m.csv",
                   "wsi_id,patient_id,label,image_path,source_mpp\n"
                   "a,p1,LumA,img/a.png,0.5\n"
                   "b,p2,LumB,img/b.png,0.25\n"
                   "c,p3,HER2,/abs/c.png,0.5\n"
                   "d,p4,BL,img/d.png,0.5\n");
    const auto m = load_manifest(dir / "m.csv");
    ASSERT_EQ(m.records.size(), 4u);
    EXPECT_EQ(m.find("d").label, "Basal");
    EXPECT_EQ(m.find("b").source_mpp, 0.25);
    EXPECT_EQ(m.find("a").image_path, dir / "img/a.png");
    EXPECT_EQ(m.find("c").image_path, std::filesystem::path("/abs/c.png"));
    EXPECT_THROW(m.find("zzz"), ValidationError);
}

TEST(Manifest, RejectsDuplicateIds) {
    TempDir dir;
    io::write_file(dir / "m.csv",
                   "wsi_id,patient_id,label,image_path,source_mpp\n"
                   "a,p1,LumA,a.png,0.5\n"
                   "a,p2,LumB,b.png,0.5\n");
    EXPECT_THROW(load_manifest(dir / "m.csv"), ValidationError);
}

TEST(Manifest, RejectsNormalLike) {
    TempDir dir;
    io::write_file(dir / "m.csv",
                   "wsi_id,patient_id,label,image_path,source_mpp\n"
                   "a,p1,Normal-like,a.png,0.5\n");
    EXPECT_THROW(load_manifest(dir / "m.csv"), ValidationError);
}

TEST(Manifest, RejectsBadRowsAndMissingFile) {
    TempDir dir;
    io::write_file(dir / "m.csv",
                   "wsi_id,patient_id,label,image_path,source_mpp\n"
                   "a,p1,LumA,a.png,0\n");
    EXPECT_THROW(load_manifest(dir / "m.csv"), ValidationError);
    EXPECT_THROW(load_manifest(dir / "none.csv"), ValidationError);
}

TEST(Manifest, TumorTaskLabels) {
    EXPECT_EQ(canonical_label("tumor", Task::TumorDetection), "tumor");
    EXPECT_THROW(canonical_label("LumA", Task::TumorDetection), ValidationError);
}

TEST(Manifest, SaveLoadRoundTrip) {
    TempDir dir;
    auto m = cohort({{"LumA", 3}, {"HER2", 2}});
    for (auto& r : m.records) r.image_path = dir / "img" / (r.wsi_id + ".png");
    save_manifest(dir / "m.csv", m);
    const auto back = load_manifest(dir / "m.csv");
    ASSERT_EQ(back.records.size(), m.records.size());
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        EXPECT_EQ(back.records[i].wsi_id, m.records[i].wsi_id);
        EXPECT_EQ(back.records[i].image_path, m.records[i].image_path);
    }
}

TEST(Split, ExactSizesForDivisibleCohort) {
    const auto m = cohort({{"LumA", 100}});
    const auto s = stratified_patient_split(m, {0.7, 0.0, 0.15, 0.15}, 1);
    EXPECT_EQ(s.members(SplitSet::CnnTrain).size(), 70u);
    EXPECT_EQ(s.members(SplitSet::CnnVal).size(), 0u);
    EXPECT_EQ(s.members(SplitSet::XgbSet).size(), 15u);
    EXPECT_EQ(s.members(SplitSet::Test).size(), 15u);
}

TEST(Split, PatientsStayTogether) {
    const auto m = cohort({{"LumA", 20}, {"Basal", 20}}, 3);
    const auto s = stratified_patient_split(m, {0.7, 0.1, 0.1, 0.1}, 4);
    std::map<std::string, std::set<SplitSet>> sets_of_patient;
    for (const auto& r : m.records) sets_of_patient[r.patient_id].insert(s.assignment.at(r.wsi_id));
    for (const auto& [p, sets] : sets_of_patient) EXPECT_EQ(sets.size(), 1u) << p;
    EXPECT_EQ(s.assignment.size(), m.records.size());
}

TEST(Split, StratifiesEachClass) {
    const auto m = cohort({{"LumA", 40}, {"Basal", 40}});
    const auto s = stratified_patient_split(m, {0.5, 0.0, 0.25, 0.25}, 9);
    std::map<SplitSet, std::map<std::string, int>> tally;
    for (const auto& r : m.records) ++tally[s.assignment.at(r.wsi_id)][r.label];
    EXPECT_EQ(tally[SplitSet::CnnTrain]["LumA"], 20);
    EXPECT_EQ(tally[SplitSet::CnnTrain]["Basal"], 20);
    for (auto set : {SplitSet::XgbSet, SplitSet::Test}) {
        EXPECT_EQ(tally[set]["LumA"], 10);
        EXPECT_EQ(tally[set]["Basal"], 10);
    }
}

TEST(Split, MixedLabelPatientUsesMajority) {
    CohortManifest m = cohort({{"LumA", 4}, {"LumB", 4}});
    m.records.push_back({"mix-1", "MIX", "LumB", "x.png", 0.5});
    m.records.push_back({"mix-2", "MIX", "LumB", "x.png", 0.5});
    m.records.push_back({"mix-3", "MIX", "LumA", "x.png", 0.5});
    const auto s = stratified_patient_split(m, {0.5, 0.0, 0.25, 0.25}, 2);
    EXPECT_EQ(s.assignment.at("mix-1"), s.assignment.at("mix-3"));
    EXPECT_EQ(s.assignment.at("mix-2"), s.assignment.at("mix-3"));
}

TEST(Split, DeterministicAndSerializable) {
    TempDir dir;
    const auto m = cohort({{"LumA", 30}, {"LumB", 25}, {"HER2", 12}, {"Basal", 18}}, 2);
    const auto a = stratified_patient_split(m, {0.7, 0.1, 0.1, 0.1}, 77);
    const auto b = stratified_patient_split(m, {0.7, 0.1, 0.1, 0.1}, 77);
    EXPECT_EQ(serialize_split(a), serialize_split(b));
    const auto c = stratified_patient_split(m, {0.7, 0.1, 0.1, 0.1}, 78);
    EXPECT_NE(serialize_split(a), serialize_split(c));
    save_split(dir / "s.csv", a);
    EXPECT_EQ(load_split(dir / "s.csv").assignment, a.assignment);
}

TEST(Split, Errors) {
    EXPECT_THROW(stratified_patient_split(cohort({{"LumA", 10}}), {0.5, 0.5, 0.5, 0.0}, 1), ValidationError);
    EXPECT_THROW(stratified_patient_split(cohort({{"LumA", 2}}), {0.7, 0.1, 0.1, 0.1}, 1), ValidationError);
}

TEST(Quota, DrawsExactlyTheQuota) {
    QuotaPolicy policy{{{"LumA", 441}, {"HER2", std::nullopt}}};
    const auto tiles = make_tiles("w", 1000);
    const auto picked = sample_tile_quota(tiles, "LumA", policy, 3);
    EXPECT_EQ(picked.size(), 441u);
    std::set<std::string> ids;
    for (const auto& t : picked) ids.insert(t.tile_id);
    EXPECT_EQ(ids.size(), 441u);
    // subset of the input, input order kept
    std::size_t pos = 0;
    for (const auto& t : picked) {
        while (pos < tiles.size() && tiles[pos].tile_id != t.tile_id) ++pos;
        ASSERT_LT(pos, tiles.size());
    }
    EXPECT_EQ(sample_tile_quota(tiles, "LumA", policy, 3), picked);
}

TEST(Quota, ShortfallAndAll) {
    QuotaPolicy policy{{{"LumA", 441}, {"HER2", std::nullopt}}};
    const auto few = make_tiles("w", 200);
    EXPECT_EQ(sample_tile_quota(few, "LumA", policy, 3), few);
    const auto her2 = make_tiles("h", 700);
    EXPECT_EQ(sample_tile_quota(her2, "HER2", policy, 3), her2);
}

TEST(Ovr, BalancedNegatives) {
    std::map<Subtype, std::vector<TileRecord>> by_class;
    for (auto s : kAllSubtypes) by_class[s] = make_tiles(std::string(subtype_name(s)), 300);
    const auto ds = build_ovr_dataset(Subtype::LumA, by_class, 5);
    std::map<Subtype, int> pos, neg;
    for (const auto& e : ds) (e.is_target ? pos : neg)[e.source]++;
    EXPECT_EQ(pos[Subtype::LumA], 300);
    EXPECT_EQ(neg[Subtype::LumB], 100);
    EXPECT_EQ(neg[Subtype::HER2], 100);
    EXPECT_EQ(neg[Subtype::Basal], 100);
    EXPECT_EQ(neg[Subtype::LumA], 0);
}

TEST(Ovr, FloorOfThirds) {
    std::map<Subtype, std::vector<TileRecord>> by_class{{Subtype::HER2, make_tiles("h", 10)},
                                                       {Subtype::LumA, make_tiles("a", 90)},
                                                       {Subtype::LumB, make_tiles("b", 91)},
                                                       {Subtype::Basal, make_tiles("c", 92)}};
    const auto ds = build_ovr_dataset(Subtype::HER2, by_class, 5);
    std::map<Subtype, std::set<std::string>> neg;
    for (const auto& e : ds)
        if (!e.is_target) neg[e.source].insert(e.tile.tile_id);
    for (auto s : {Subtype::LumA, Subtype::LumB, Subtype::Basal}) EXPECT_EQ(neg[s].size(), 30u);
}

TEST(Ovr, EmptyRestAndEmptyTarget) {
    std::map<Subtype, std::vector<TileRecord>> by_class{{Subtype::HER2, make_tiles("h", 300)},
                                                       {Subtype::LumA, {}}};
    const auto ds = build_ovr_dataset(Subtype::HER2, by_class, 1);
    EXPECT_EQ(ds.size(), 300u);
    EXPECT_THROW(build_ovr_dataset(Subtype::LumA, by_class, 1), ValidationError);
}
