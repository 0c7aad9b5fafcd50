/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_webmodel_free: (a: number, b: number) => void;
export const webmodel_knn: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const webmodel_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const webmodel_pca: (a: number) => [number, number, number, number];
export const webmodel_project: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const webmodel_summary: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
