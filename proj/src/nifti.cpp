/*
 * ctatlas : registration and atlas construction for chest CT
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "ctatlas/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

#include "ctatlas/errors.hpp"

namespace ctatlas {

namespace {

struct NiftiHeader { // NIfTI-1, 348 bytes with natural alignment
    std::int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    std::int32_t extents;
    std::int16_t session_error;
    char regular;
    char dim_info;
    std::int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    std::int16_t intent_code;
    std::int16_t datatype;
    std::int16_t bitpix;
    std::int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    std::int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration, toffset;
    std::int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    std::int16_t qform_code, sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must pack to 348 bytes");

constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kIntentVector = 1007;

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<unsigned char> bytes(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw IoError("cannot read " + path);
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("cannot write " + path);
}

bool is_gzip(const std::vector<unsigned char>& b) {
    return b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b;
}

std::vector<unsigned char> gunzip(const std::vector<unsigned char>& in, const std::string& path) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw IoError("zlib init failed for " + path);
    std::vector<unsigned char> out;
    out.resize(std::max<std::size_t>(in.size() * 4, 1 << 20));
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    std::size_t produced = 0;
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        if (produced == out.size()) out.resize(out.size() * 2);
        zs.next_out = out.data() + produced;
        zs.avail_out = static_cast<uInt>(out.size() - produced);
        rc = inflate(&zs, Z_NO_FLUSH);
        produced = out.size() - zs.avail_out;
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw IoError("corrupt gzip stream in " + path);
        }
    }
    inflateEnd(&zs);
    out.resize(produced);
    return out;
}

std::vector<unsigned char> gzip_bytes(const std::vector<unsigned char>& in,
                                      const std::string& path) {
    z_stream zs{};
    // Default gzip header: zero mtime, so outputs are byte-stable.
    if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
        throw IoError("zlib init failed for " + path);
    std::vector<unsigned char> out(deflateBound(&zs, static_cast<uLong>(in.size())));
    zs.next_in = const_cast<unsigned char*>(in.data());
    zs.avail_in = static_cast<uInt>(in.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    if (deflate(&zs, Z_FINISH) != Z_STREAM_END) {
        deflateEnd(&zs);
        throw IoError("gzip compression failed for " + path);
    }
    out.resize(out.size() - zs.avail_out);
    deflateEnd(&zs);
    return out;
}

NiftiHeader parse_header(const std::vector<unsigned char>& bytes, const std::string& path) {
    if (bytes.size() < sizeof(NiftiHeader))
        throw IoError("malformed header in " + path + ": file shorter than 348 bytes");
    NiftiHeader hdr;
    std::memcpy(&hdr, bytes.data(), sizeof(hdr));
    if (hdr.sizeof_hdr != 348) {
        std::int32_t swapped;
        unsigned char b[4] = {bytes[3], bytes[2], bytes[1], bytes[0]};
        std::memcpy(&swapped, b, 4);
        if (swapped == 348)
            throw IoError("byte-swapped NIfTI unsupported: " + path);
        throw IoError("malformed header in " + path + ": sizeof_hdr != 348");
    }
    if (std::memcmp(hdr.magic, "n+1", 4) != 0)
        throw IoError("malformed header in " + path + ": expected single-file magic n+1");
    return hdr;
}

// Orientation of one data axis: which world axis it advances and the signed
// step in mm.
struct AxisMap {
    int world_axis;
    double step;
};

// Extracts an axis-aligned grid from the header. Permutations and flips are
// described by the returned AxisMap per data axis; oblique sforms are
// rejected.
struct RawGeometry {
    AxisMap axis[3];
    Vec3 translation; // world position of data voxel (0,0,0)
};

RawGeometry extract_orientation(const NiftiHeader& hdr, const std::string& path) {
    RawGeometry rg;
    if (hdr.sform_code > 0) {
        const float* rows[3] = {hdr.srow_x, hdr.srow_y, hdr.srow_z};
        bool used[3] = {false, false, false};
        for (int j = 0; j < 3; ++j) {
            int best = -1;
            double norm = 0.0;
            for (int a = 0; a < 3; ++a) norm += double(rows[a][j]) * rows[a][j];
            norm = std::sqrt(norm);
            if (norm <= 0.0)
                throw IoError("malformed header in " + path + ": zero sform column");
            for (int a = 0; a < 3; ++a) {
                if (std::abs(rows[a][j]) > 1e-4 * norm) {
                    if (best >= 0)
                        throw GeometryError("oblique orientation unsupported: " + path);
                    best = a;
                }
            }
            if (used[best]) throw GeometryError("degenerate sform in " + path);
            used[best] = true;
            rg.axis[j] = {best, static_cast<double>(rows[best][j])};
        }
        rg.translation = {hdr.srow_x[3], hdr.srow_y[3], hdr.srow_z[3]};
        return rg;
    }
    if (hdr.qform_code > 0) {
        if (std::abs(hdr.quatern_b) > 1e-6 || std::abs(hdr.quatern_c) > 1e-6 ||
            std::abs(hdr.quatern_d) > 1e-6)
            throw GeometryError("rotated qform unsupported: " + path);
        const double qfac = hdr.pixdim[0] < 0.0f ? -1.0 : 1.0;
        for (int j = 0; j < 3; ++j) {
            const double sp = hdr.pixdim[j + 1];
            if (!(sp > 0.0))
                throw IoError("malformed header in " + path + ": non-positive pixdim");
            rg.axis[j] = {j, j == 2 ? qfac * sp : sp};
        }
        rg.translation = {hdr.qoffset_x, hdr.qoffset_y, hdr.qoffset_z};
        return rg;
    }
    for (int j = 0; j < 3; ++j) {
        const double sp = hdr.pixdim[j + 1];
        if (!(sp > 0.0)) throw IoError("malformed header in " + path + ": non-positive pixdim");
        rg.axis[j] = {j, sp};
    }
    rg.translation = {0.0, 0.0, 0.0};
    return rg;
}

// Converts raw samples laid out in file order into a canonical +x/+y/+z
// volume. decode(file_index) must yield {value, valid}.
template <typename Decode>
Volume canonicalize(const NiftiHeader& hdr, const RawGeometry& rg, Decode&& decode) {
    const int fdims[3] = {hdr.dim[1], hdr.dim[2], hdr.dim[3]};
    Geometry geom;
    int src_axis_of[3];  // data axis feeding each world axis
    for (int j = 0; j < 3; ++j) {
        const int a = rg.axis[j].world_axis;
        src_axis_of[a] = j;
        const double step = rg.axis[j].step;
        const double sp = std::abs(step);
        const int n = fdims[j];
        // world coordinate of the lowest-index output voxel along axis a
        const double o = step > 0 ? rg.translation[a] : rg.translation[a] + step * (n - 1);
        if (a == 0) {
            geom.dims.x = n;
            geom.spacing.x = sp;
            geom.origin.x = o;
        } else if (a == 1) {
            geom.dims.y = n;
            geom.spacing.y = sp;
            geom.origin.y = o;
        } else {
            geom.dims.z = n;
            geom.spacing.z = sp;
            geom.origin.z = o;
        }
    }
    Volume vol(geom);
    std::size_t fidx = 0;
    int idx[3];
    for (idx[2] = 0; idx[2] < fdims[2]; ++idx[2])
        for (idx[1] = 0; idx[1] < fdims[1]; ++idx[1])
            for (idx[0] = 0; idx[0] < fdims[0]; ++idx[0], ++fidx) {
                int out[3];
                for (int a = 0; a < 3; ++a) {
                    const int j = src_axis_of[a];
                    out[a] = rg.axis[j].step > 0 ? idx[j] : fdims[j] - 1 - idx[j];
                }
                const auto [value, ok] = decode(fidx);
                const std::size_t oidx = geom.index(out[0], out[1], out[2]);
                if (ok) {
                    vol.data[oidx] = value;
                    vol.valid[oidx] = 1;
                } else {
                    vol.data[oidx] = kAirHU;
                    vol.valid[oidx] = 0;
                }
            }
    return vol;
}

NiftiHeader blank_header(const Geometry& geom) {
    NiftiHeader hdr;
    std::memset(&hdr, 0, sizeof(hdr));
    hdr.sizeof_hdr = 348;
    hdr.regular = 'r';
    hdr.dim[0] = 3;
    hdr.dim[1] = static_cast<std::int16_t>(geom.dims.x);
    hdr.dim[2] = static_cast<std::int16_t>(geom.dims.y);
    hdr.dim[3] = static_cast<std::int16_t>(geom.dims.z);
    hdr.dim[4] = hdr.dim[5] = hdr.dim[6] = hdr.dim[7] = 1;
    hdr.datatype = kDtFloat32;
    hdr.bitpix = 32;
    hdr.pixdim[0] = 1.0f;
    hdr.pixdim[1] = static_cast<float>(geom.spacing.x);
    hdr.pixdim[2] = static_cast<float>(geom.spacing.y);
    hdr.pixdim[3] = static_cast<float>(geom.spacing.z);
    hdr.vox_offset = 352.0f;
    hdr.scl_slope = 1.0f;
    hdr.scl_inter = 0.0f;
    hdr.xyzt_units = 2; // mm
    hdr.sform_code = 1;
    hdr.srow_x[0] = static_cast<float>(geom.spacing.x);
    hdr.srow_x[3] = static_cast<float>(geom.origin.x);
    hdr.srow_y[1] = static_cast<float>(geom.spacing.y);
    hdr.srow_y[3] = static_cast<float>(geom.origin.y);
    hdr.srow_z[2] = static_cast<float>(geom.spacing.z);
    hdr.srow_z[3] = static_cast<float>(geom.origin.z);
    std::memcpy(hdr.magic, "n+1", 4);
    return hdr;
}

void check_dims_16bit(const Geometry& geom) {
    if (geom.dims.x < 1 || geom.dims.y < 1 || geom.dims.z < 1 || geom.dims.x > 32767 ||
        geom.dims.y > 32767 || geom.dims.z > 32767)
        throw IoError("grid dimensions out of NIfTI-1 range");
}

void emit(const std::string& path, const NiftiHeader& hdr, const float* payload,
          std::size_t count) {
    std::vector<unsigned char> bytes(352 + count * 4, 0);
    std::memcpy(bytes.data(), &hdr, sizeof(hdr));
    std::memcpy(bytes.data() + 352, payload, count * 4);
    if (path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0)
        write_file_bytes(path, gzip_bytes(bytes, path));
    else
        write_file_bytes(path, bytes);
}

const unsigned char* payload_ptr(const std::vector<unsigned char>& bytes, const NiftiHeader& hdr,
                                 std::size_t count, const std::string& path) {
    const std::size_t offset =
        std::max<std::size_t>(352, static_cast<std::size_t>(hdr.vox_offset));
    const std::size_t bytes_per = static_cast<std::size_t>(hdr.bitpix) / 8;
    if (bytes.size() < offset + count * bytes_per)
        throw IoError("malformed header in " + path + ": data shorter than dim promises");
    return bytes.data() + offset;
}

} // namespace

Volume read_volume(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (is_gzip(bytes)) bytes = gunzip(bytes, path);
    const NiftiHeader hdr = parse_header(bytes, path);
    if (hdr.dim[0] != 3)
        throw IoError("expected a 3-D volume in " + path + ", dim[0]=" +
                      std::to_string(hdr.dim[0]));
    if (hdr.datatype != kDtInt16 && hdr.datatype != kDtFloat32)
        throw IoError("unsupported datatype " + std::to_string(hdr.datatype) + " in " + path);
    for (int j = 1; j <= 3; ++j)
        if (hdr.dim[j] < 1)
            throw IoError("malformed header in " + path + ": non-positive dim");
    const std::size_t count = static_cast<std::size_t>(hdr.dim[1]) * hdr.dim[2] * hdr.dim[3];
    const RawGeometry rg = extract_orientation(hdr, path);
    const double slope = hdr.scl_slope == 0.0f ? 1.0 : hdr.scl_slope;
    const double inter = hdr.scl_inter;
    const unsigned char* payload = payload_ptr(bytes, hdr, count, path);

    if (hdr.datatype == kDtInt16) {
        return canonicalize(hdr, rg, [&](std::size_t i) -> std::pair<float, bool> {
            std::int16_t raw;
            std::memcpy(&raw, payload + i * 2, 2);
            if (raw == std::numeric_limits<std::int16_t>::min()) return {0.0f, false};
            return {static_cast<float>(slope * raw + inter), true};
        });
    }
    return canonicalize(hdr, rg, [&](std::size_t i) -> std::pair<float, bool> {
        float raw;
        std::memcpy(&raw, payload + i * 4, 4);
        if (!std::isfinite(raw)) return {0.0f, false};
        return {static_cast<float>(slope * raw + inter), true};
    });
}

void write_volume(const std::string& path, const Volume& vol) {
    check_dims_16bit(vol.geom);
    const NiftiHeader hdr = blank_header(vol.geom);
    std::vector<float> payload(vol.data.size());
    const float nan = std::numeric_limits<float>::quiet_NaN();
    for (std::size_t i = 0; i < payload.size(); ++i)
        payload[i] = vol.valid[i] ? vol.data[i] : nan;
    emit(path, hdr, payload.data(), payload.size());
}

DisplacementField read_field(const std::string& path) {
    auto bytes = read_file_bytes(path);
    if (is_gzip(bytes)) bytes = gunzip(bytes, path);
    const NiftiHeader hdr = parse_header(bytes, path);
    if (hdr.dim[0] != 5 || hdr.dim[4] != 1 || hdr.dim[5] != 3)
        throw IoError("expected a displacement field in " + path +
                      " (dim [5, nx, ny, nz, 1, 3])");
    if (hdr.intent_code != kIntentVector)
        throw IoError("expected vector intent code 1007 in " + path);
    if (hdr.datatype != kDtFloat32)
        throw IoError("unsupported datatype " + std::to_string(hdr.datatype) + " in " + path);
    const RawGeometry rg = extract_orientation(hdr, path);
    for (int j = 0; j < 3; ++j)
        if (rg.axis[j].world_axis != j || rg.axis[j].step <= 0.0)
            throw GeometryError("displacement fields must use a positive diagonal sform: " +
                                path);
    Geometry geom;
    geom.dims = {hdr.dim[1], hdr.dim[2], hdr.dim[3]};
    geom.spacing = {rg.axis[0].step, rg.axis[1].step, rg.axis[2].step};
    geom.origin = rg.translation;

    const std::size_t count = geom.voxel_count();
    const unsigned char* payload = payload_ptr(bytes, hdr, count * 3, path);
    DisplacementField field(geom);
    double* comps[3] = {field.ux.data(), field.uy.data(), field.uz.data()};
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < count; ++i) {
            float raw;
            std::memcpy(&raw, payload + (c * count + i) * 4, 4);
            if (!std::isfinite(raw))
                throw IoError("displacement field contains non-finite values: " + path);
            comps[c][i] = raw;
        }
    }
    return field;
}

void write_field(const std::string& path, const DisplacementField& field) {
    check_dims_16bit(field.geom);
    NiftiHeader hdr = blank_header(field.geom);
    hdr.dim[0] = 5;
    hdr.dim[5] = 3;
    hdr.intent_code = kIntentVector;
    const std::size_t count = field.geom.voxel_count();
    std::vector<float> payload(count * 3);
    for (std::size_t i = 0; i < count; ++i) payload[i] = static_cast<float>(field.ux[i]);
    for (std::size_t i = 0; i < count; ++i) payload[count + i] = static_cast<float>(field.uy[i]);
    for (std::size_t i = 0; i < count; ++i)
        payload[2 * count + i] = static_cast<float>(field.uz[i]);
    emit(path, hdr, payload.data(), payload.size());
}

} // namespace ctatlas
