/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_image_free: (a: number, b: number) => void;
export const __wbg_inversion_free: (a: number, b: number) => void;
export const basis_curves: (a: number, b: number) => [number, number, number, number];
export const image_height: (a: number) => number;
export const image_values: (a: number) => [number, number];
export const image_width: (a: number) => number;
export const inversion_objective: (a: number) => [number, number];
export const inversion_reconstruction: (a: number) => number;
export const inversion_rel_error: (a: number) => number;
export const inversion_status: (a: number) => [number, number];
export const inversion_truth: (a: number) => number;
export const invert: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const travel_time_section: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const __externref_table_alloc: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
