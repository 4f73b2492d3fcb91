#pragma once

// Storage for the detection records of an ensemble, one record per
// trajectory id.  Large ensembles can spill to a flat binary file:
//
//   magic "FBQTREC\0" | u32 version (1) | u32 row size (18)
//   rows: u64 trajectory id | f64 time | u8 detector | u8 multiplicity
//
// all little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fbqt/dynamics.hpp"
#include "fbqt/error.hpp"

namespace fbqt {

static_assert(std::endian::native == std::endian::little, "record spill format assumes a little-endian host");

inline constexpr std::array<char, 8> kRecordMagic = {'F', 'B', 'Q', 'T', 'R', 'E', 'C', '\0'};
inline constexpr std::uint32_t kRecordVersion = 1;
inline constexpr std::uint32_t kRecordRowSize = 18;

class RecordStore {
public:
    RecordStore() = default;

    /// Keeps at most `memory_limit` events in memory; beyond that, all
    /// records move to `spill_path` and further appends go straight to disk.
    RecordStore(std::size_t memory_limit, std::filesystem::path spill_path)
        : limit_(memory_limit), spill_path_(std::move(spill_path)) {}

    RecordStore(const RecordStore&) = delete;
    RecordStore& operator=(const RecordStore&) = delete;
    RecordStore(RecordStore&&) = default;
    RecordStore& operator=(RecordStore&&) = default;

    /// Records must be appended in increasing id order, one call per trajectory.
    void append(std::uint64_t id, const DetectionRecord& rec) {
        if (id != trajectories_)
            throw ContractError("RecordStore::append: ids must be consecutive from 0");
        ++trajectories_;
        events_ += rec.size();
        if (spilled()) {
            write_rows(id, rec);
            return;
        }
        records_.push_back(rec);
        if (limit_ && events_ > *limit_)
            spill();
    }

    std::uint64_t trajectories() const { return trajectories_; }
    std::uint64_t events() const { return events_; }
    bool spilled() const { return out_.is_open(); }

    /// Visits every trajectory in id order, including empty records.
    void for_each(const std::function<void(std::uint64_t, const DetectionRecord&)>& fn) const {
        if (!spilled()) {
            for (std::uint64_t i = 0; i < records_.size(); ++i)
                fn(i, records_[i]);
            return;
        }
        const_cast<RecordStore*>(this)->out_.flush();
        std::uint64_t next = 0;
        DetectionRecord cur;
        std::optional<std::uint64_t> cur_id;
        read_spill_file(spill_path_, [&](std::uint64_t id, const DetectionEvent& e) {
            if (cur_id && id != *cur_id) {
                for (; next < *cur_id; ++next)
                    fn(next, {});
                fn(next++, cur);
                cur.clear();
            }
            cur_id = id;
            cur.push_back(e);
        });
        if (cur_id) {
            for (; next < *cur_id; ++next)
                fn(next, {});
            fn(next++, cur);
        }
        for (; next < trajectories_; ++next)
            fn(next, {});
    }

    DetectionRecord at(std::uint64_t id) const {
        if (id >= trajectories_)
            throw ValidationError("RecordStore::at: id out of range");
        if (!spilled())
            return records_[id];
        DetectionRecord out;
        for_each([&](std::uint64_t i, const DetectionRecord& r) {
            if (i == id)
                out = r;
        });
        return out;
    }

    /// Writes every record to `path` in the spill format.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os)
            throw IoError("cannot open " + path.string() + " for writing");
        write_header(os);
        for_each([&](std::uint64_t id, const DetectionRecord& r) {
            for (const auto& e : r)
                write_row(os, id, e);
        });
        if (!os)
            throw IoError("write failed on " + path.string());
    }

    static void read_spill_file(const std::filesystem::path& path,
                                const std::function<void(std::uint64_t, const DetectionEvent&)>& fn) {
        std::ifstream is(path, std::ios::binary);
        if (!is)
            throw IoError("cannot open " + path.string());
        std::array<char, 8> magic{};
        std::uint32_t version = 0, row = 0;
        is.read(magic.data(), 8);
        is.read(reinterpret_cast<char*>(&version), 4);
        is.read(reinterpret_cast<char*>(&row), 4);
        if (!is || magic != kRecordMagic)
            throw IoError(path.string() + ": not a detection record file");
        if (version != kRecordVersion || row != kRecordRowSize)
            throw IoError(path.string() + ": unsupported record format version " + std::to_string(version));
        std::array<char, kRecordRowSize> buf{};
        while (is.read(buf.data(), kRecordRowSize)) {
            std::uint64_t id;
            DetectionEvent e;
            std::memcpy(&id, buf.data(), 8);
            std::memcpy(&e.time, buf.data() + 8, 8);
            const auto det = static_cast<std::uint8_t>(buf[16]);
            if (det > 2)
                throw IoError(path.string() + ": corrupt detector field");
            e.detector = static_cast<Detector>(det);
            e.multiplicity = static_cast<std::uint8_t>(buf[17]);
            fn(id, e);
        }
        if (is.gcount() != 0)
            throw IoError(path.string() + ": truncated row");
    }

    static RecordStore load(const std::filesystem::path& path, std::uint64_t trajectories) {
        RecordStore s;
        std::vector<DetectionRecord> recs(trajectories);
        read_spill_file(path, [&](std::uint64_t id, const DetectionEvent& e) {
            if (id >= trajectories)
                throw IoError(path.string() + ": trajectory id beyond declared count");
            recs[id].push_back(e);
        });
        for (std::uint64_t i = 0; i < trajectories; ++i)
            s.append(i, recs[i]);
        return s;
    }

private:
    static void write_header(std::ostream& os) {
        os.write(kRecordMagic.data(), 8);
        os.write(reinterpret_cast<const char*>(&kRecordVersion), 4);
        os.write(reinterpret_cast<const char*>(&kRecordRowSize), 4);
    }
    static void write_row(std::ostream& os, std::uint64_t id, const DetectionEvent& e) {
        std::array<char, kRecordRowSize> buf{};
        std::memcpy(buf.data(), &id, 8);
        std::memcpy(buf.data() + 8, &e.time, 8);
        buf[16] = static_cast<char>(e.detector);
        buf[17] = static_cast<char>(e.multiplicity);
        os.write(buf.data(), kRecordRowSize);
    }
    void write_rows(std::uint64_t id, const DetectionRecord& rec) {
        for (const auto& e : rec)
            write_row(out_, id, e);
        if (!out_)
            throw IoError("write failed on " + spill_path_.string());
    }
    void spill() {
        out_.open(spill_path_, std::ios::binary | std::ios::trunc);
        if (!out_)
            throw IoError("cannot open spill file " + spill_path_.string());
        write_header(out_);
        for (std::uint64_t i = 0; i < records_.size(); ++i)
            write_rows(i, records_[i]);
        records_.clear();
        records_.shrink_to_fit();
    }

    std::vector<DetectionRecord> records_;
    std::optional<std::size_t> limit_;
    std::filesystem::path spill_path_;
    std::ofstream out_;
    std::uint64_t trajectories_ = 0;
    std::uint64_t events_ = 0;
};

} // namespace fbqt
