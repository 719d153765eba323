/**
 * Compressed-sparse-row mask payloads as they travel over the session API:
 * {height, width, row_ptr, col_idx} with row_ptr of length height+1 and
 * strictly increasing column indices within each row.
 */

export interface CsrMask {
  height: number;
  width: number;
  row_ptr: number[];
  col_idx: number[];
}

/** Decode a CSR payload into a flat row-major 0/1 byte mask. */
export function decodeCsr(payload: CsrMask): Uint8Array {
  const { height, width, row_ptr, col_idx } = payload;
  if (height < 1 || width < 1) {
    throw new Error(`bad mask dimensions ${height}x${width}`);
  }
  if (row_ptr.length !== height + 1 || row_ptr[0] !== 0) {
    throw new Error("row_ptr must have length height+1 and start at 0");
  }
  if (row_ptr[height] !== col_idx.length) {
    throw new Error("row_ptr tail does not match col_idx length");
  }
  const bits = new Uint8Array(height * width);
  for (let r = 0; r < height; r++) {
    const start = row_ptr[r];
    const end = row_ptr[r + 1];
    if (end < start) throw new Error("row_ptr must be non-decreasing");
    let prev = -1;
    for (let k = start; k < end; k++) {
      const c = col_idx[k];
      if (c <= prev || c >= width) {
        throw new Error(`bad column ${c} in row ${r}`);
      }
      bits[r * width + c] = 1;
      prev = c;
    }
  }
  return bits;
}

/** Exact inverse of decodeCsr for exporting the current mask. */
export function encodeCsr(bits: Uint8Array, height: number, width: number): CsrMask {
  if (bits.length !== height * width) {
    throw new Error("mask buffer does not match dimensions");
  }
  const row_ptr = new Array<number>(height + 1);
  const col_idx: number[] = [];
  row_ptr[0] = 0;
  for (let r = 0; r < height; r++) {
    for (let c = 0; c < width; c++) {
      if (bits[r * width + c]) col_idx.push(c);
    }
    row_ptr[r + 1] = col_idx.length;
  }
  return { height, width, row_ptr, col_idx };
}

export function maskArea(payload: CsrMask): number {
  return payload.row_ptr[payload.height];
}
